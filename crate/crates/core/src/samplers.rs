//! Conditional samplers for a gadget instance given its phase vector,
//! partition-function estimators, and the rejection step that turns
//! phase-level samples into samples of the gadget model.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::gadget::GadgetInstance;
use crate::logspace::{ln_2cosh, ln_binom, log_sum_exp, LogAcc};
use crate::spin::SpinConfiguration;

/// Proposal budget per conditional draw before giving up.
pub const MAX_PROPOSALS: usize = 10_000_000;
/// Importance-sampling budget per estimate.
pub const MAX_IMPORTANCE_SAMPLES: usize = 100_000_000;
/// Sector windows longer than this are resampled on the fly instead of cached.
pub const SECTOR_CACHE_LIMIT: usize = 1 << 20;
/// Gadgets with at most this many (edge count, vertex count) cells keep a vertex-law table.
pub const VERTEX_CACHE_LIMIT: usize = 4096;

/// A seed plus a stream id; equal pairs give equal random sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut r = ChaCha20Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }

    /// Child stream derived from a label, independent of call order.
    pub fn split(&self, label: &str) -> RngStream {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.stream.to_le_bytes());
        hasher.update(label.as_bytes());
        let d = hasher.finalize();
        let word = |i: usize| u64::from_le_bytes(d[i..i + 8].try_into().expect("8 bytes"));
        RngStream {
            seed: word(0),
            stream: word(8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub log_value: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Median batches (1 for the importance estimator).
    pub repetitions: usize,
    pub samples: usize,
    /// Batches restarted with doubled sample size after an empty count.
    pub retries: usize,
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {x} outside (0,1)")))
    }
}

// ---------------------------------------------------------------------------
// Down-up walk on weighted k-subsets

fn check_subset(d: &[usize], w: &[f64]) -> Result<()> {
    if d.is_empty() || d.len() > w.len() {
        return Err(Error::InvalidArgument(format!(
            "subset size {} outside 1..={}",
            d.len(),
            w.len()
        )));
    }
    if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    if d.iter().any(|&i| i >= w.len()) {
        return Err(Error::InvalidArgument("subset element out of range".into()));
    }
    Ok(())
}

/// Drops a uniform element of `d`, then adds j ∉ d∖{i} with probability ∝ w_j.
/// Stationary law ∝ ∏_{i∈D} w_i. The result is sorted.
pub fn down_up_step<R: Rng + ?Sized>(d: &[usize], w: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    check_subset(d, w)?;
    let drop = rng.gen_range(0..d.len());
    let mut rest: Vec<usize> = d.iter().copied().enumerate().filter(|&(i, _)| i != drop).map(|x| x.1).collect();
    let mut inside = vec![false; w.len()];
    rest.iter().for_each(|&i| inside[i] = true);
    let total: f64 = (0..w.len()).filter(|&j| !inside[j]).map(|j| w[j]).sum();
    let mut u = rng.gen::<f64>() * total;
    let mut pick = d[drop];
    for j in (0..w.len()).filter(|&j| !inside[j]) {
        u -= w[j];
        pick = j;
        if u <= 0.0 {
            break;
        }
    }
    rest.push(pick);
    rest.sort_unstable();
    Ok(rest)
}

/// Exact one-step transition probability of [`down_up_step`] between sorted subsets.
pub fn down_up_transition(from: &[usize], to: &[usize], w: &[f64]) -> f64 {
    let k = from.len() as f64;
    let mut p = 0.0;
    for drop in 0..from.len() {
        let rest: Vec<usize> = from.iter().copied().enumerate().filter(|&(i, _)| i != drop).map(|x| x.1).collect();
        let total: f64 = (0..w.len()).filter(|j| !rest.contains(j)).map(|j| w[j]).sum();
        for j in (0..w.len()).filter(|j| !rest.contains(j)) {
            let mut cand = rest.clone();
            cand.push(j);
            cand.sort_unstable();
            if cand == to {
                p += w[j] / total / k;
            }
        }
    }
    p
}

/// Steps of the down-up walk used for a δ′-accurate tilted k-subset of r items.
pub fn mixing_steps(r: usize, delta: f64) -> usize {
    (4.0 * r as f64 * (r as f64 / delta).ln()).ceil().max(1.0) as usize
}

/// Approximate draw of a k-subset with law ∝ ∏ w_i by running the down-up walk.
pub fn tilted_subset<R: Rng + ?Sized>(w: &[f64], k: usize, delta: f64, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut d: Vec<usize> = (0..k).collect();
    check_subset(&d, w)?;
    for _ in 0..mixing_steps(w.len(), delta) {
        d = down_up_step(&d, w, rng)?;
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// R block given S

/// Draws the plus count k on R_v given the S_v magnetization and phase.
pub fn sample_sector<R: Rng + ?Sized>(inst: &GadgetInstance, v: usize, ms: i64, y: i8, rng: &mut R) -> u128 {
    inst.profile(v).sample_k(y, inst.beta() * ms as f64, rng)
}

/// ±1 assignment on R_v given σ_S and Y_v. The conditional fields on R_v are
/// uniform, so after the sector the subset is exactly uniform.
pub fn sample_r_given_s<R: Rng + ?Sized>(
    inst: &GadgetInstance,
    v: usize,
    s: &[i8],
    y: i8,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<i8>> {
    check_len(inst.n_sites(), s.len())?;
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("delta = {delta} must be positive")));
    }
    let r = usize::try_from(inst.r(v)).map_err(|_| Error::SizeGuard {
        what: "block size",
        value: usize::MAX,
        limit: usize::MAX,
    })?;
    let ms: i64 = inst.site_range(v).map(|i| s[i] as i64).sum();
    let k = sample_sector(inst, v, ms, y, rng) as usize;
    Ok(uniform_block(r, k, rng))
}

/// Same law as [`sample_r_given_s`], with the subset drawn by the down-up walk.
pub fn sample_r_given_s_walk<R: Rng + ?Sized>(
    inst: &GadgetInstance,
    v: usize,
    s: &[i8],
    y: i8,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<i8>> {
    check_len(inst.n_sites(), s.len())?;
    let r = inst.r(v) as usize;
    let ms: i64 = inst.site_range(v).map(|i| s[i] as i64).sum();
    let k = sample_sector(inst, v, ms, y, rng) as usize;
    let field = inst.beta() * ms as f64 / r as f64;
    let w = vec![(2.0 * field).exp(); r];
    let d = tilted_subset(&w, k, delta / 2.0, rng)?;
    let mut out = vec![-1i8; r];
    d.into_iter().for_each(|i| out[i] = 1);
    Ok(out)
}

fn uniform_block<R: Rng + ?Sized>(r: usize, k: usize, rng: &mut R) -> Vec<i8> {
    let mut out = vec![-1i8; r];
    if 2 * k <= r {
        index::sample(rng, r, k).into_iter().for_each(|i| out[i] = 1);
    } else {
        out.iter_mut().for_each(|x| *x = 1);
        index::sample(rng, r, r - k).into_iter().for_each(|i| out[i] = -1);
    }
    out
}

// ---------------------------------------------------------------------------
// S given the phase vector

/// Exact sampler for σ_S given Y = y and optional pins on 𝓢.
///
/// Matched pairs are proposed independently from the product of vertex
/// factors and matching weights; a proposal is accepted with probability
/// ∏_v ρ_v/max ρ_v where ρ_v depends only on the edge-site plus count of
/// gadget v. Vertex sites are then drawn exactly given that count.
#[derive(Clone, Debug)]
pub struct SConditional<'a> {
    inst: &'a GadgetInstance,
    y: Vec<i8>,
    pins: Vec<Option<i8>>,
    groups: Vec<PairGroup>,
    log_pair_norm: f64,
    log_rho: Vec<Vec<f64>>,
    log_rho_max: Vec<f64>,
    log_rho_min: Vec<f64>,
    free_vertex: Vec<Vec<usize>>,
    pinned_vertex_m: Vec<i64>,
    /// [gadget][edge plus count] → cumulative law of the free vertex plus
    /// count, kept only for small gadgets
    vertex_cdf: Vec<Option<Vec<Vec<f64>>>>,
    edge_sites: Vec<usize>,
    proposals: usize,
}

const PAIR_STATES: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Matched pairs sharing gadgets, coupling and pins; their proposal states
/// are i.i.d., so a proposal only needs the multinomial state counts.
#[derive(Clone, Debug)]
struct PairGroup {
    pairs: Vec<(usize, usize)>,
    gadgets: (usize, usize),
    /// probabilities of ++, +−, −+, −−
    probs: [f64; 4],
    log_norm: f64,
}

impl PairGroup {
    fn counts<R: Rng + ?Sized>(&self, rng: &mut R) -> [u64; 4] {
        let mut left = self.pairs.len() as u64;
        let mut mass = 1.0;
        let mut out = [0u64; 4];
        for i in 0..3 {
            if left == 0 {
                break;
            }
            let p = if mass > 0.0 { (self.probs[i] / mass).clamp(0.0, 1.0) } else { 0.0 };
            let c = Binomial::new(left, p).expect("p in [0,1]").sample(rng);
            out[i] = c;
            left -= c;
            mass -= self.probs[i];
        }
        out[3] = left;
        out
    }
}

impl<'a> SConditional<'a> {
    /// With `certify`, fails when a per-gadget ratio leaves the (1 ± ε/(5m))
    /// band guaranteed for proof-valid block sizes.
    pub fn new(inst: &'a GadgetInstance, y: &[i8], pins: &[Option<i8>], certify: bool) -> Result<Self> {
        check_len(inst.m(), y.len())?;
        check_len(inst.n_sites(), pins.len())?;
        if y.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("phase entries must be ±1".into()));
        }
        let m = inst.m();
        let sites = inst.sites();
        let bm = inst.beta() * inst.consts().m_plus();
        let mut groups: Vec<PairGroup> = Vec::new();
        let mut group_of: HashMap<(usize, usize, u64, Option<i8>, Option<i8>), usize> = HashMap::new();
        for &(a, b, w) in inst.pairs() {
            let (ga, gb) = (sites[a].gadget, sites[b].gadget);
            let key = (ga, gb, w.to_bits(), pins[a], pins[b]);
            let gi = *group_of.entry(key).or_insert_with(|| {
                let (ya, yb) = (y[ga] as f64, y[gb] as f64);
                let logs: Vec<f64> = PAIR_STATES
                    .iter()
                    .map(|&(sa, sb)| {
                        let ok = pins[a].map_or(true, |p| p == sa) && pins[b].map_or(true, |p| p == sb);
                        if ok {
                            bm * (ya * sa as f64 + yb * sb as f64) + w * (sa * sb) as f64
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let norm = log_sum_exp(&logs);
                let mut probs = [0.0; 4];
                probs.iter_mut().zip(&logs).for_each(|(p, l)| *p = (l - norm).exp());
                groups.push(PairGroup {
                    pairs: Vec::new(),
                    gadgets: (ga, gb),
                    probs,
                    log_norm: norm,
                });
                groups.len() - 1
            });
            groups[gi].pairs.push((a, b));
        }
        let log_pair_norm: f64 = groups.iter().map(|g| g.pairs.len() as f64 * g.log_norm).sum();
        let mut log_rho = Vec::with_capacity(m);
        let mut free_vertex = Vec::with_capacity(m);
        let mut pinned_vertex_m = Vec::with_capacity(m);
        let mut edge_sites = Vec::with_capacity(m);
        for v in 0..m {
            let vp = &inst.plan().vertices[v];
            let range = inst.site_range(v);
            let t0 = vp.t0 as usize;
            let te = vp.edge_sites() as usize;
            let marg = inst.vertex_marginal(v, y[v], pins);
            let rho: Vec<f64> = marg
                .iter()
                .enumerate()
                .map(|(je, f)| f - y[v] as f64 * bm * (2.0 * je as f64 - te as f64))
                .collect();
            let verts = range.start..range.start + t0;
            pinned_vertex_m.push(verts.clone().filter_map(|i| pins[i]).map(|s| s as i64).sum::<i64>());
            free_vertex.push(verts.filter(|&i| pins[i].is_none()).collect::<Vec<usize>>());
            edge_sites.push(te);
            log_rho.push(rho);
        }
        let mut me_partial = SConditional {
            inst,
            y: y.to_vec(),
            pins: pins.to_vec(),
            groups: Vec::new(),
            log_pair_norm: 0.0,
            log_rho: Vec::new(),
            log_rho_max: Vec::new(),
            log_rho_min: Vec::new(),
            free_vertex,
            pinned_vertex_m,
            vertex_cdf: Vec::new(),
            edge_sites,
            proposals: 0,
        };
        me_partial.vertex_cdf = (0..m)
            .map(|v| {
                let rows = me_partial.edge_sites[v] + 1;
                let cols = me_partial.free_vertex[v].len() + 1;
                (rows * cols <= VERTEX_CACHE_LIMIT)
                    .then(|| (0..rows).map(|je| cumulative(&me_partial.vertex_row(v, je))).collect())
            })
            .collect();
        // Only edge-site counts reachable under the pins enter the envelope.
        let reach = reachable_counts(inst, pins);
        let log_rho_max: Vec<f64> = (0..m)
            .map(|v| reach[v].iter().map(|&je| log_rho[v][je]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let log_rho_min: Vec<f64> = (0..m)
            .map(|v| reach[v].iter().map(|&je| log_rho[v][je]).fold(f64::INFINITY, f64::min))
            .collect();
        let me = SConditional {
            groups,
            log_pair_norm,
            log_rho,
            log_rho_max,
            log_rho_min,
            ..me_partial
        };
        if certify {
            me.certify()?;
        }
        Ok(me)
    }

    /// Checks every gadget's exact conditional-to-product ratio on its edge
    /// sites against 1 ± ε/(5m).
    fn certify(&self) -> Result<()> {
        let inst = self.inst;
        let eps0 = inst.plan().block_epsilon();
        let bm = inst.beta() * inst.consts().m_plus();
        let unpinned = self.pins.iter().all(Option::is_none);
        let free = vec![None; inst.n_sites()];
        for v in 0..inst.m() {
            let te = self.edge_sites[v];
            let ys = self.y[v] as f64 * bm;
            // log ρ_v = F_v − y·βm₊·M_E
            let rho: Vec<f64> = if unpinned {
                self.log_rho[v].clone()
            } else {
                inst.vertex_marginal(v, self.y[v], &free)
                    .iter()
                    .enumerate()
                    .map(|(je, f)| f - ys * (2.0 * je as f64 - te as f64))
                    .collect()
            };
            let z = log_sum_exp(
                &rho.iter()
                    .enumerate()
                    .map(|(je, r)| ln_binom(te as u64, je as u64) + r + ys * (2.0 * je as f64 - te as f64))
                    .collect::<Vec<_>>(),
            );
            for (je, r) in rho.iter().enumerate() {
                let ratio = (r - z + te as f64 * ln_2cosh(bm)).exp();
                if ratio > 1.0 + eps0 || ratio < 1.0 - eps0 {
                    return Err(Error::EnvelopeViolation {
                        gadget: v,
                        magnetization: 2 * je as i64 - te as i64,
                        ratio,
                        bound: 1.0 + eps0,
                    });
                }
            }
        }
        Ok(())
    }

    /// max/min of the importance weight ∏ ρ_v over reachable proposals.
    pub fn log_weight_range(&self) -> f64 {
        self.log_rho_max.iter().zip(&self.log_rho_min).map(|(a, b)| a - b).sum()
    }

    pub fn proposals(&self) -> usize {
        self.proposals
    }

    fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<[u64; 4]>, Vec<usize>) {
        let mut plus = vec![0usize; self.inst.m()];
        let counts: Vec<[u64; 4]> = self
            .groups
            .iter()
            .map(|g| {
                let c = g.counts(rng);
                plus[g.gadgets.0] += (c[0] + c[1]) as usize;
                plus[g.gadgets.1] += (c[0] + c[2]) as usize;
                c
            })
            .collect();
        (counts, plus)
    }

    /// Places the drawn state counts of every group on a uniform arrangement of its pairs.
    fn assign<R: Rng + ?Sized>(&self, counts: &[[u64; 4]], s: &mut [i8], rng: &mut R) {
        for (g, c) in self.groups.iter().zip(counts) {
            let mut states: Vec<usize> = (0..4).flat_map(|i| std::iter::repeat(i).take(c[i] as usize)).collect();
            states.shuffle(rng);
            for (&(a, b), st) in g.pairs.iter().zip(states) {
                (s[a], s[b]) = PAIR_STATES[st];
            }
        }
    }

    fn log_weight(&self, plus: &[usize]) -> f64 {
        plus.iter().enumerate().map(|(v, &je)| self.log_rho[v][je]).sum()
    }

    /// Unnormalized log-law of the free vertex plus count of gadget v given
    /// its edge-site plus count.
    fn vertex_row(&self, v: usize, je: usize) -> Vec<f64> {
        let inst = self.inst;
        let vp = &inst.plan().vertices[v];
        let nf = self.free_vertex[v].len() as i64;
        let t = vp.t() as i64;
        let me = 2 * je as i64 - self.edge_sites[v] as i64;
        (0..=nf)
            .map(|jv| {
                let mv = self.pinned_vertex_m[v] + 2 * jv - nf;
                let j = ((me + mv + t) / 2) as usize;
                ln_binom(nf as u64, jv as u64) + vp.h_tilde * mv as f64 + inst.log_g(v, self.y[v], j)
            })
            .collect()
    }

    /// Draws the free vertex sites of every gadget given its edge-site plus count.
    fn fill_vertices<R: Rng + ?Sized>(&self, plus: &[usize], s: &mut [i8], rng: &mut R) {
        for (v, &je) in plus.iter().enumerate() {
            let free = &self.free_vertex[v];
            let jv = match &self.vertex_cdf[v] {
                Some(table) => draw_cdf(&table[je], rng),
                None => draw_cdf(&cumulative(&self.vertex_row(v, je)), rng),
            };
            free.iter().for_each(|&i| s[i] = -1);
            for i in index::sample(rng, free.len(), jv) {
                s[free[i]] = 1;
            }
        }
    }

    fn base(&self) -> Vec<i8> {
        self.pins.iter().map(|p| p.unwrap_or(1)).collect()
    }

    /// One exact draw of σ_S.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<i8>> {
        let mut s = self.base();
        let max: f64 = self.log_rho_max.iter().sum();
        for _ in 0..MAX_PROPOSALS {
            self.proposals += 1;
            let (counts, plus) = self.propose(rng);
            let log_acc = self.log_weight(&plus) - max;
            if log_acc >= 0.0 || rng.gen::<f64>().ln() < log_acc {
                self.assign(&counts, &mut s, rng);
                self.fill_vertices(&plus, &mut s, rng);
                return Ok(s);
            }
        }
        Err(Error::Domain(format!("no acceptance within {MAX_PROPOSALS} proposals")))
    }

    /// log of the proposal normalizer: ∏ over pairs of their local sums.
    pub fn log_pair_norm(&self) -> f64 {
        self.log_pair_norm
    }

    /// One importance weight log ∏ ρ_v for a fresh proposal.
    pub fn importance_weight<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.log_weight(&self.propose(rng).1)
    }
}

fn reachable_counts(inst: &GadgetInstance, pins: &[Option<i8>]) -> Vec<Vec<usize>> {
    (0..inst.m())
        .map(|v| {
            let range = inst.site_range(v);
            let t0 = inst.plan().vertices[v].t0 as usize;
            let edge = range.start + t0..range.end;
            let fixed = edge.clone().filter(|&i| pins[i] == Some(1)).count();
            let free = edge.filter(|&i| pins[i].is_none()).count();
            (fixed..=fixed + free).collect()
        })
        .collect()
}

fn cumulative(logs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logs);
    let mut acc = 0.0;
    let mut out: Vec<f64> = logs
        .iter()
        .map(|l| {
            acc += (l - z).exp();
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

fn draw_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// σ_S from μ_𝓗(σ_S = · | Y = y). The sampler is exact, so δ only has to be positive.
pub fn sample_s_given_y<R: Rng + ?Sized>(inst: &GadgetInstance, y: &[i8], delta: f64, rng: &mut R) -> Result<Vec<i8>> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("delta = {delta} must be positive")));
    }
    SConditional::new(inst, y, &vec![None; inst.n_sites()], inst.proof_valid())?.draw(rng)
}

/// A configuration of the gadget model stored as σ_S plus the plus count of
/// every R block; R positions are exchangeable given the count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactSample {
    pub s: Vec<i8>,
    pub k: Vec<u128>,
}

impl CompactSample {
    pub fn phase(&self, inst: &GadgetInstance) -> Vec<i8> {
        self.k.iter().enumerate().map(|(v, &k)| inst.phase_of_sector(v, k)).collect()
    }

    /// The configuration with every site +1.
    pub fn all_plus(inst: &GadgetInstance) -> Self {
        CompactSample {
            s: vec![1; inst.n_sites()],
            k: (0..inst.m()).map(|v| inst.r(v)).collect(),
        }
    }

    /// Full configuration with R positions drawn uniformly given each count.
    pub fn expand<R: Rng + ?Sized>(&self, inst: &GadgetInstance, rng: &mut R) -> Result<SpinConfiguration> {
        let n = inst.n_usize()?;
        let mut out = SpinConfiguration::all(n, 1);
        for (i, &x) in inst.site_index().iter().zip(&self.s) {
            out.set(*i as usize, x);
        }
        for v in 0..inst.m() {
            let rr = inst.r_range(v);
            let block = uniform_block(inst.r(v) as usize, self.k[v] as usize, rng);
            for (off, x) in block.into_iter().enumerate() {
                out.set(rr.start as usize + off, x);
            }
        }
        Ok(out)
    }

    /// Compacts a full configuration.
    pub fn from_config(inst: &GadgetInstance, sigma: &SpinConfiguration) -> Result<Self> {
        let s = inst.s_part(sigma)?;
        let k = (0..inst.m())
            .map(|v| {
                let rr = inst.r_range(v);
                let m = sigma.magnetization(rr.start as usize, rr.end as usize);
                ((inst.r(v) as i64 + m) / 2) as u128
            })
            .collect();
        Ok(CompactSample { s, k })
    }
}

/// Repeated draws from μ_𝓗(· | Y = y) with cached sector laws.
pub struct PhaseSampler<'a> {
    inst: &'a GadgetInstance,
    y: Vec<i8>,
    s_sampler: SConditional<'a>,
    sectors: HashMap<(usize, usize), (Vec<u128>, Vec<f64>)>,
}

impl<'a> PhaseSampler<'a> {
    pub fn new(inst: &'a GadgetInstance, y: &[i8], delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("delta = {delta} must be positive")));
        }
        Self::with_certification(inst, y, inst.proof_valid())
    }

    pub fn with_certification(inst: &'a GadgetInstance, y: &[i8], certify: bool) -> Result<Self> {
        Ok(PhaseSampler {
            inst,
            y: y.to_vec(),
            s_sampler: SConditional::new(inst, y, &vec![None; inst.n_sites()], certify)?,
            sectors: HashMap::new(),
        })
    }

    fn sector<R: Rng + ?Sized>(&mut self, v: usize, j: usize, rng: &mut R) -> u128 {
        let inst = self.inst;
        let profile = inst.profile(v);
        let t = inst.t(v) as i64;
        let ms = 2 * j as i64 - t;
        if profile.is_laplace() || profile.window_len() > SECTOR_CACHE_LIMIT {
            return sample_sector(inst, v, ms, self.y[v], rng);
        }
        let y = self.y[v];
        let entry = self.sectors.entry((v, j)).or_insert_with(|| {
            let terms = profile.log_terms(y, inst.beta() * ms as f64);
            let logs: Vec<f64> = terms.iter().map(|t| t.1).collect();
            (terms.iter().map(|t| t.0).collect(), cumulative(&logs))
        });
        entry.0[draw_cdf(&entry.1, rng)]
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<CompactSample> {
        let s = self.s_sampler.draw(rng)?;
        let mut k = Vec::with_capacity(self.inst.m());
        for v in 0..self.inst.m() {
            let j = self.inst.site_range(v).filter(|&i| s[i] > 0).count();
            k.push(self.sector(v, j, rng));
        }
        Ok(CompactSample { s, k })
    }

    pub fn proposals(&self) -> usize {
        self.s_sampler.proposals()
    }
}

/// One draw from μ_𝓗(· | Y = y): σ_S with budget δ/2, then every R block with δ/2.
pub fn sample_conditional_on_phase<R: Rng + ?Sized>(
    inst: &GadgetInstance,
    y: &[i8],
    delta: f64,
    rng: &mut R,
) -> Result<CompactSample> {
    PhaseSampler::new(inst, y, delta / 2.0)?.draw(rng)
}

// ---------------------------------------------------------------------------
// Partition-function estimators

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JsOptions {
    /// Samples per coordinate; defaults to ⌈128 n/ε²⌉.
    pub t: Option<usize>,
    /// Median batches; defaults to the smallest odd count ≥ 8 ln(1/δ).
    pub batches: Option<usize>,
}

pub fn default_batches(delta: f64) -> usize {
    let b = (8.0 * (1.0 / delta).ln()).ceil().max(1.0) as usize;
    b | 1
}

/// Counting by sampling: fixes a greedy assignment x* one coordinate at a
/// time, estimates each conditional marginal W_k from fresh samples, and
/// returns ν(x*)/∏Ŵ_k, amplified by a median over batches.
///
/// `log_nu` evaluates log ν(x) on a full assignment; `cond` returns a full
/// sample from ν(· | x_{<k} = prefix).
pub fn js_count<R, V, S>(
    log_nu: V,
    mut cond: S,
    n: usize,
    epsilon: f64,
    delta: f64,
    opts: &JsOptions,
    rng: &mut R,
) -> Result<EstimateResult>
where
    R: Rng + ?Sized,
    V: Fn(&[i8]) -> Result<f64>,
    S: FnMut(&[i8], &mut R) -> Result<Vec<i8>>,
{
    check_unit("epsilon", epsilon)?;
    check_unit("delta", delta)?;
    let t0 = opts.t.unwrap_or_else(|| (128.0 * n as f64 / (epsilon * epsilon)).ceil() as usize).max(1);
    let batches = opts.batches.unwrap_or_else(|| default_batches(delta)).max(1);
    let mut estimates = Vec::with_capacity(batches);
    let mut samples = 0;
    let mut retries = 0;
    for _ in 0..batches {
        let mut t = t0;
        loop {
            match js_batch(&log_nu, &mut cond, n, t, rng, &mut samples)? {
                Some(x) => {
                    estimates.push(x);
                    break;
                }
                None => {
                    retries += 1;
                    t = t.checked_mul(2).ok_or_else(|| Error::Domain("sample size overflow".into()))?;
                }
            }
        }
    }
    estimates.sort_by(|a, b| a.total_cmp(b));
    Ok(EstimateResult {
        log_value: estimates[estimates.len() / 2],
        epsilon,
        delta,
        repetitions: batches,
        samples,
        retries,
    })
}

fn js_batch<R, V, S>(log_nu: &V, cond: &mut S, n: usize, t: usize, rng: &mut R, samples: &mut usize) -> Result<Option<f64>>
where
    R: Rng + ?Sized,
    V: Fn(&[i8]) -> Result<f64>,
    S: FnMut(&[i8], &mut R) -> Result<Vec<i8>>,
{
    let mut prefix: Vec<i8> = Vec::with_capacity(n);
    let mut log_w = 0.0;
    for k in 0..n {
        let mut plus = 0usize;
        for _ in 0..t {
            let x = cond(&prefix, rng)?;
            check_len(n, x.len())?;
            plus += (x[k] > 0) as usize;
        }
        let choice: i8 = if 2 * plus >= t { 1 } else { -1 };
        let mut hits = 0usize;
        for _ in 0..t {
            let x = cond(&prefix, rng)?;
            hits += (x[k] == choice) as usize;
        }
        *samples += 2 * t;
        if hits == 0 {
            return Ok(None);
        }
        log_w += (hits as f64 / t as f64).ln();
        prefix.push(choice);
    }
    Ok(Some(log_nu(&prefix)? - log_w))
}

/// log Z_𝓗(y) (relative to the instance reference) by importance sampling
/// against the product proposal; the sample count is ⌈κ⁴/(2ε²)·ln(2/δ)⌉
/// with κ² the exact max/min ratio of the importance weights.
pub fn estimate_z_phase<R: Rng + ?Sized>(
    inst: &GadgetInstance,
    y: &[i8],
    epsilon: f64,
    delta: f64,
    rng: &mut R,
) -> Result<EstimateResult> {
    check_unit("epsilon", epsilon)?;
    check_unit("delta", delta)?;
    let sampler = SConditional::new(inst, y, &vec![None; inst.n_sites()], inst.proof_valid())?;
    let range = sampler.log_weight_range();
    let n = (((2.0 * range).exp() / (2.0 * epsilon * epsilon)) * (2.0 / delta).ln()).ceil();
    if !(n <= MAX_IMPORTANCE_SAMPLES as f64) {
        return Err(Error::SizeGuard {
            what: "importance samples",
            value: n.min(usize::MAX as f64) as usize,
            limit: MAX_IMPORTANCE_SAMPLES,
        });
    }
    let n = (n as usize).max(1);
    let mut acc = LogAcc::default();
    for _ in 0..n {
        acc.push(sampler.importance_weight(rng));
    }
    Ok(EstimateResult {
        log_value: sampler.log_pair_norm() + acc.value() - (n as f64).ln(),
        epsilon,
        delta,
        repetitions: 1,
        samples: n,
        retries: 0,
    })
}

/// log Z_𝓗(y) by [`js_count`] over 𝓢 with the exact pinned conditional sampler.
pub fn estimate_z_phase_js<R: Rng + ?Sized>(
    inst: &GadgetInstance,
    y: &[i8],
    epsilon: f64,
    delta: f64,
    opts: &JsOptions,
    rng: &mut R,
) -> Result<EstimateResult> {
    let ns = inst.n_sites();
    let mut cached: Option<(Vec<i8>, SConditional)> = None;
    let cond = |prefix: &[i8], rng: &mut R| -> Result<Vec<i8>> {
        if cached.as_ref().map_or(true, |c| c.0 != prefix) {
            let mut pins = vec![None; ns];
            for (p, &x) in pins.iter_mut().zip(prefix) {
                *p = Some(x);
            }
            cached = Some((prefix.to_vec(), SConditional::new(inst, y, &pins, false)?));
        }
        cached.as_mut().expect("just filled").1.draw(rng)
    };
    js_count(|s| inst.exact_pinned_mass(s, y), cond, ns, epsilon, delta, opts, rng)
}

// ---------------------------------------------------------------------------
// Rejection from phase samples to gadget samples

#[derive(Clone, Debug, PartialEq)]
pub enum ZSource {
    /// Exact Z_𝓗(y).
    Exact,
    /// Importance estimate with relative accuracy `epsilon_js` and failure probability `delta`.
    Estimated { epsilon_js: f64, delta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectOptions {
    /// Number of accepted samples wanted.
    pub k: usize,
    /// Slack ε in the threshold Ẑ/((1+ε_js)(1+ε)·A·μ_H(y)).
    pub epsilon: f64,
    pub source: ZSource,
    /// Fill a short stream with the all-plus configuration instead of failing.
    pub pad: bool,
    /// Accuracy parameter handed to the conditional sampler.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptRecord {
    pub index: usize,
    pub y_hash: String,
    pub accepted: bool,
    pub log_z: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct RejectionOutput {
    pub samples: Vec<CompactSample>,
    pub accepted_indices: Vec<usize>,
    pub log: Vec<AcceptRecord>,
    pub padded: usize,
}

impl RejectionOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.accepted_indices.len() as f64 / self.log.len() as f64
    }
}

/// Hex of the bit-packed phase vector (bit i set when y_i = +1).
pub fn phase_key(y: &[i8]) -> String {
    let mut bytes = vec![0u8; y.len().div_ceil(8)];
    for (i, &s) in y.iter().enumerate() {
        if s > 0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    hex::encode(bytes)
}

pub fn acceptance_csv(log: &[AcceptRecord]) -> String {
    let mut out = String::from("index,y_hash,accepted,log_z,threshold\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e}\n",
            r.index, r.y_hash, r.accepted as u8, r.log_z, r.threshold
        ));
    }
    out
}

/// Turns a stream of source-model phase vectors into samples of the gadget
/// model: accept y with probability min{Ẑ(y)/((1+ε_js)(1+ε)·A·μ_H(y)), 1},
/// then draw from μ_𝓗(· | Y = y). Ẑ is cached per distinct y.
pub fn rejection_reduce<I, R>(
    stream: I,
    inst: &GadgetInstance,
    opts: &RejectOptions,
    rng: &mut R,
) -> Result<RejectionOutput>
where
    I: IntoIterator<Item = Vec<i8>>,
    R: Rng + ?Sized,
{
    if !(opts.epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon = {} must be nonnegative", opts.epsilon)));
    }
    let slack_js = match opts.source {
        ZSource::Exact => 0.0,
        ZSource::Estimated { epsilon_js, delta } => {
            check_unit("epsilon_js", epsilon_js)?;
            check_unit("delta", delta)?;
            epsilon_js.ln_1p()
        }
    };
    let mut cache: HashMap<Vec<i8>, f64> = HashMap::new();
    let mut samplers: HashMap<Vec<i8>, PhaseSampler> = HashMap::new();
    let mut out = RejectionOutput {
        samples: Vec::with_capacity(opts.k),
        accepted_indices: Vec::new(),
        log: Vec::new(),
        padded: 0,
    };
    let mut seen = 0;
    for (index, y) in stream.into_iter().enumerate() {
        if out.samples.len() >= opts.k {
            break;
        }
        seen += 1;
        let log_z = match cache.get(&y) {
            Some(&z) => z,
            None => {
                let z = match opts.source {
                    ZSource::Exact => inst.exact_log_z_phase(&y)?,
                    ZSource::Estimated { epsilon_js, delta } => {
                        estimate_z_phase(inst, &y, epsilon_js, delta, rng)?.log_value
                    }
                };
                cache.insert(y.clone(), z);
                z
            }
        };
        let log_thr =
            log_z - slack_js - opts.epsilon.ln_1p() - inst.log_a() - inst.log_mu_source(&y)?;
        let threshold = log_thr.exp().min(1.0);
        let accepted = rng.gen::<f64>() < threshold;
        out.log.push(AcceptRecord {
            index,
            y_hash: phase_key(&y),
            accepted,
            log_z,
            threshold,
        });
        if accepted {
            if !samplers.contains_key(&y) {
                samplers.insert(y.clone(), PhaseSampler::new(inst, &y, opts.delta)?);
            }
            let sampler = samplers.get_mut(&y).expect("just inserted");
            out.samples.push(sampler.draw(rng)?);
            out.accepted_indices.push(index);
        }
    }
    if out.samples.len() < opts.k {
        if !opts.pad {
            return Err(Error::Shortfall {
                seen,
                accepted: out.samples.len(),
                wanted: opts.k,
            });
        }
        while out.samples.len() < opts.k {
            out.samples.push(CompactSample::all_plus(inst));
            out.padded += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gadget::{materialize, plan, PlanOptions};
    use crate::ising::IsingModel;

    #[test]
    fn streams_reproduce() {
        let a = RngStream::new(7, 1);
        let x: Vec<u64> = (0..4).map(|_| a.rng().gen()).collect();
        let mut r1 = a.rng();
        let mut r2 = a.rng();
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        assert_eq!(x[0], x[1]);
        assert_ne!(a.split("s").seed, a.split("t").seed);
        assert_ne!(RngStream::new(7, 2).rng().gen::<u64>(), a.rng().gen::<u64>());
    }

    #[test]
    fn two_state_walk() {
        let mut rng = RngStream::new(1, 0).rng();
        let w = [1.0, 2.0];
        let mut d = vec![0usize];
        let mut ones = 0;
        let steps = 100_000;
        for _ in 0..steps {
            d = down_up_step(&d, &w, &mut rng).unwrap();
            ones += d[0];
        }
        assert!((ones as f64 / steps as f64 - 2.0 / 3.0).abs() < 0.01);
        assert!(down_up_step(&[], &w, &mut rng).is_err());
        assert!(down_up_step(&[0], &[1.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn detailed_balance_small() {
        let w = [0.4, 1.3, 2.0, 0.7, 1.1, 0.9];
        let subsets: Vec<Vec<usize>> = (0u32..64)
            .filter(|x| x.count_ones() == 3)
            .map(|x| (0..6).filter(|i| x >> i & 1 == 1).collect())
            .collect();
        let pi = |d: &[usize]| d.iter().map(|&i| w[i]).product::<f64>();
        for a in &subsets {
            let row: f64 = subsets.iter().map(|b| down_up_transition(a, b, &w)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for b in &subsets {
                let lhs = pi(a) * down_up_transition(a, b, &w);
                let rhs = pi(b) * down_up_transition(b, a, &w);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    fn micro(h: Vec<f64>, j: f64, r: u128) -> GadgetInstance {
        let m = h.len();
        let mut jm = vec![0.0; m * m];
        if m == 2 {
            jm[1] = j;
            jm[2] = j;
        }
        let model = IsingModel::new(m, jm, h).unwrap();
        let opts = PlanOptions {
            r_scale: 1.0,
            r_override: Some(r),
        };
        materialize(&plan(&model, 2.0, 0.01, &opts).unwrap(), false).unwrap()
    }

    #[test]
    fn matchings_free_accepts_every_proposal() {
        let inst = micro(vec![0.3, -0.2], 0.0, 5);
        let mut rng = RngStream::new(2, 0).rng();
        let y = [1, -1];
        let mut s = SConditional::new(&inst, &y, &vec![None; inst.n_sites()], false).unwrap();
        for _ in 0..1000 {
            s.draw(&mut rng).unwrap();
        }
        assert_eq!(s.proposals(), 1000);
        let est = estimate_z_phase(&inst, &y, 0.05, 0.05, &mut rng).unwrap();
        let exact = inst.exact_log_z_phase(&y).unwrap();
        assert!((est.log_value - exact).abs() < 1e-6);
        assert!((inst.log_z_unmatched(&y).unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn phase_always_matches() {
        let inst = micro(vec![0.3, -0.2], 0.4, 5);
        let mut rng = RngStream::new(3, 0).rng();
        for y in [[1i8, 1], [1, -1], [-1, 1], [-1, -1]] {
            let mut ps = PhaseSampler::new(&inst, &y, 0.01).unwrap();
            for _ in 0..500 {
                let c = ps.draw(&mut rng).unwrap();
                assert_eq!(c.phase(&inst), y.to_vec());
                let full = c.expand(&inst, &mut rng).unwrap();
                assert_eq!(inst.phase_readout(&full).unwrap(), y.to_vec());
                assert_eq!(CompactSample::from_config(&inst, &full).unwrap(), c);
            }
        }
    }

    #[test]
    fn empty_stream_is_a_shortfall() {
        let inst = micro(vec![0.1], 0.0, 3);
        let mut rng = RngStream::new(4, 0).rng();
        let opts = RejectOptions {
            k: 1,
            epsilon: 0.5,
            source: ZSource::Exact,
            pad: false,
            delta: 0.01,
        };
        let err = rejection_reduce(Vec::<Vec<i8>>::new(), &inst, &opts, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Shortfall { seen: 0, accepted: 0, wanted: 1 }));
        let padded = rejection_reduce(
            Vec::<Vec<i8>>::new(),
            &inst,
            &RejectOptions { pad: true, ..opts },
            &mut rng,
        )
        .unwrap();
        assert_eq!(padded.padded, 1);
        assert_eq!(padded.samples[0], CompactSample::all_plus(&inst));
    }

    #[test]
    fn js_product_model() {
        // ν(x) = 1 on {±1}², Z = 4
        let mut ok = 0;
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 9).rng();
            let cond = |prefix: &[i8], rng: &mut ChaCha20Rng| -> Result<Vec<i8>> {
                let mut x = prefix.to_vec();
                while x.len() < 2 {
                    x.push(if rng.gen::<bool>() { 1 } else { -1 });
                }
                Ok(x)
            };
            let est = js_count(|_| Ok(0.0), cond, 2, 0.1, 0.25, &JsOptions::default(), &mut rng).unwrap();
            if (est.log_value.exp() / 4.0 - 1.0).abs() < 0.1 {
                ok += 1;
            }
        }
        assert!(ok >= 18, "{ok}");
    }

    #[test]
    fn s_given_y_matches_brute_force() {
        let inst = micro(vec![0.3, -0.2], 0.4, 3);
        let n = inst.n_usize().unwrap();
        assert!(n <= 20, "{n}");
        let dense = crate::ising::brute_force_table(&inst.dense_export().unwrap()).unwrap();
        let ns = inst.n_sites();
        let y = [1i8, -1];
        let mut exact = vec![0.0; 1 << ns];
        for idx in 0..dense.len() {
            let sigma = SpinConfiguration::from_index(n, idx as u64);
            if inst.phase_readout(&sigma).unwrap() != y {
                continue;
            }
            let s = inst.s_part(&sigma).unwrap();
            let key = s.iter().enumerate().filter(|x| *x.1 > 0).map(|x| 1usize << x.0).sum::<usize>();
            exact[key] += dense.prob(idx);
        }
        let total: f64 = exact.iter().sum();
        exact.iter_mut().for_each(|p| *p /= total);
        let mut rng = RngStream::new(11, 0).rng();
        let mut sampler = SConditional::new(&inst, &y, &vec![None; ns], false).unwrap();
        let draws = 200_000;
        let mut counts = vec![0.0; 1 << ns];
        for _ in 0..draws {
            let s = sampler.draw(&mut rng).unwrap();
            let key = s.iter().enumerate().filter(|x| *x.1 > 0).map(|x| 1usize << x.0).sum::<usize>();
            counts[key] += 1.0 / draws as f64;
        }
        let tv: f64 = 0.5 * exact.iter().zip(&counts).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.03, "tv {tv}");
        let est = estimate_z_phase(&inst, &y, 0.02, 0.05, &mut rng).unwrap();
        let z = inst.exact_log_z_phase(&y).unwrap();
        assert!((est.log_value - z).abs() < 0.03, "{} vs {z}", est.log_value);
    }
}
