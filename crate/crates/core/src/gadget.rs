//! Phase gadgets: every vertex of a small Ising model is replaced by a
//! Curie-Weiss block whose majority sign stands in for the original spin.
//!
//! Block sizes in the guaranteed regime are astronomically large, so an
//! instance is never stored densely. Every log-mass below is reported relative
//! to a per-block reference `r·f(q⁺)`; for a whole instance the reference is
//! the sum over blocks (see [`GadgetInstance::log_reference`]).

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::ising::{IsingModel, ModelFile, DENSE_EIGEN_LIMIT};
use crate::logspace::{ln_2cosh, ln_binom, log_sum_exp, LogAcc};
use crate::scalar::{self, BetaConstants};
use crate::spectral;
use crate::spin::SpinConfiguration;

/// Largest block size whose anchor binomial comes straight from a factorial table.
pub const TABLE_ANCHOR_LIMIT: u128 = 170;
/// Above this block size sector sums switch to a Laplace expansion.
pub const WINDOW_LIMIT: u128 = 10_000_000_000;
/// Sector terms this far below the peak are dropped.
pub const TAIL_NATS: f64 = 50.0;
pub const DENSE_EXPORT_LIMIT: u128 = 4096;
pub const MAX_SOURCE_VERTICES: usize = 1 << 16;
pub const EXACT_STATE_LIMIT: usize = 4_000_000;
pub const FILE_VERSION: u32 = 1;

fn ln_factorial_ratio_series(n: f64) -> f64 {
    1.0 / (12.0 * n) - 1.0 / (360.0 * n * n * n)
}

/// n-th derivative of the binary entropy at `a`, n ≥ 2.
fn entropy_derivative(n: u32, a: f64) -> f64 {
    let fact: f64 = (1..=n.saturating_sub(2)).map(|i| i as f64).product();
    let sign = if (n - 1) % 2 == 0 { 1.0 } else { -1.0 };
    fact * (sign / a.powi(n as i32 - 1) - 1.0 / (1.0 - a).powi(n as i32 - 1))
}

/// ln C(r,k) + β(2k−r)²/(2r) − r·f(q⁺) without forming either large term.
fn stirling_anchor(k: &BetaConstants, r: u128, c: u128) -> f64 {
    let rf = r as f64;
    let cf = c as f64;
    let q = k.q_plus;
    let d = cf - q * rf;
    let mut taylor = 0.5 * (-2.0 * k.c1) * d * d / rf;
    taylor += scalar::f1(k.beta, q).unwrap_or(0.0) * d;
    let mut fact = 2.0;
    for n in 3..=8u32 {
        fact *= n as f64;
        taylor += entropy_derivative(n, q) * d.powi(n as i32) / (fact * rf.powi(n as i32 - 1));
    }
    let a = cf / rf;
    let rest = rf - cf;
    let gauss = -0.5 * (2.0 * std::f64::consts::PI * rf * a * (1.0 - a)).ln();
    taylor + gauss + ln_factorial_ratio_series(rf)
        - ln_factorial_ratio_series(cf)
        - ln_factorial_ratio_series(rest)
}

/// Binomial-times-Curie-Weiss weights of one block on its positive half,
/// k ∈ {(r+1)/2, …, r}; the negative half is the mirror image k ↦ r−k.
#[derive(Clone, Debug)]
pub enum SectorProfile {
    Window {
        r: u128,
        lo: u128,
        base: Vec<f64>,
    },
    Laplace {
        r: u128,
        q: f64,
        curvature: f64,
    },
}

impl SectorProfile {
    /// `tilt_bound` bounds |c| for every later call with linear tilt c·(2k−r)/r.
    pub fn new(k: &BetaConstants, r: u128, tilt_bound: f64) -> Result<Self> {
        if r == 0 || r % 2 == 0 {
            return Err(Error::InvalidArgument(format!("block size {r} must be odd")));
        }
        if r > WINDOW_LIMIT {
            return Ok(SectorProfile::Laplace {
                r,
                q: k.q_plus,
                curvature: 2.0 * k.c1,
            });
        }
        let beta = k.beta;
        let rf = r as f64;
        let half = (r + 1) / 2;
        let center = ((k.q_plus * rf).round() as u128).clamp(half, r);
        let anchor = if r <= TABLE_ANCHOR_LIMIT || center == r {
            let x = (2.0 * center as f64 - rf) / rf;
            ln_binom(r as u64, center as u64) + 0.5 * beta * rf * x * x - rf * k.f_max()
        } else {
            stirling_anchor(k, r, center)
        };
        let slope = 2.0 * tilt_bound.abs() / rf;
        let mut peak = anchor;
        let mut up = Vec::new();
        let mut cur = anchor;
        let mut kk = center;
        while kk < r {
            kk += 1;
            let kf = kk as f64;
            cur += ((rf - kf + 1.0) / kf).ln() + 2.0 * beta / rf * (2.0 * kf - 1.0 - rf);
            up.push(cur);
            peak = peak.max(cur);
            if cur + slope * ((kk - center) as f64) < peak - TAIL_NATS {
                break;
            }
        }
        let mut down = Vec::new();
        let mut cur = anchor;
        let mut kk = center;
        while kk > half {
            let kf = kk as f64;
            cur -= ((rf - kf + 1.0) / kf).ln() + 2.0 * beta / rf * (2.0 * kf - 1.0 - rf);
            kk -= 1;
            down.push(cur);
            peak = peak.max(cur);
            if cur + slope * ((center - kk) as f64) < peak - TAIL_NATS {
                break;
            }
        }
        let lo = center - down.len() as u128;
        let mut base: Vec<f64> = down.into_iter().rev().collect();
        base.push(anchor);
        base.extend(up);
        Ok(SectorProfile::Window { r, lo, base })
    }

    pub fn r(&self) -> u128 {
        match self {
            SectorProfile::Window { r, .. } | SectorProfile::Laplace { r, .. } => *r,
        }
    }

    pub fn is_laplace(&self) -> bool {
        matches!(self, SectorProfile::Laplace { .. })
    }

    /// Number of sectors summed explicitly (0 in the Laplace regime).
    pub fn window_len(&self) -> usize {
        match self {
            SectorProfile::Window { base, .. } => base.len(),
            SectorProfile::Laplace { .. } => 0,
        }
    }

    /// log Σ_{k in half y} C(r,k)·exp(β(2k−r)²/(2r) + c·(2k−r)/r) − r·f(q⁺).
    pub fn log_g(&self, y: i8, c: f64) -> f64 {
        let c = if y > 0 { c } else { -c };
        match self {
            SectorProfile::Window { r, lo, base } => {
                let rf = *r as f64;
                let mut acc = LogAcc::default();
                for (i, b) in base.iter().enumerate() {
                    let x = (2.0 * (*lo + i as u128) as f64 - rf) / rf;
                    acc.push(b + c * x);
                }
                acc.value()
            }
            SectorProfile::Laplace { r, q, curvature } => {
                let rf = *r as f64;
                c * (2.0 * q - 1.0) + 2.0 * c * c / (rf * curvature)
                    - 0.5 * (q * (1.0 - q) * curvature).ln()
            }
        }
    }

    /// Explicit (k, log-weight) pairs of half y under tilt c; empty for Laplace.
    pub fn log_terms(&self, y: i8, c: f64) -> Vec<(u128, f64)> {
        match self {
            SectorProfile::Window { r, lo, base } => {
                let rf = *r as f64;
                base.iter()
                    .enumerate()
                    .map(|(i, b)| {
                        let k = *lo + i as u128;
                        let x = (2.0 * k as f64 - rf) / rf;
                        if y > 0 {
                            (k, b + c * x)
                        } else {
                            (*r - k, b - c * x)
                        }
                    })
                    .collect()
            }
            SectorProfile::Laplace { .. } => Vec::new(),
        }
    }

    /// Draws a sector count k from half y under tilt c.
    pub fn sample_k<R: Rng + ?Sized>(&self, y: i8, c: f64, rng: &mut R) -> u128 {
        match self {
            SectorProfile::Window { .. } => {
                let terms = self.log_terms(y, c);
                let m = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = terms.iter().map(|t| (t.1 - m).exp()).sum();
                let mut u = rng.gen::<f64>() * total;
                for (k, w) in &terms {
                    u -= (w - m).exp();
                    if u <= 0.0 {
                        return *k;
                    }
                }
                terms.last().map(|t| t.0).expect("window is never empty")
            }
            SectorProfile::Laplace { r, q, curvature } => {
                let rf = *r as f64;
                let cc = if y > 0 { c } else { -c };
                let mean = q * rf + 2.0 * cc / curvature;
                let sd = (rf / curvature).sqrt();
                let z: f64 = rng.sample(StandardNormal);
                let k = (mean + sd * z).round().max(0.0) as u128;
                let k = k.clamp((r + 1) / 2, *r);
                if y > 0 {
                    k
                } else {
                    r - k
                }
            }
        }
    }
}

/// log-weights w_j = log Σ_{τ: j plus signs} exp(Σ h_i τ_i), j = 0..=t.
pub fn field_polynomial(fields: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0];
    for &h in fields {
        let mut next = vec![f64::NEG_INFINITY; w.len() + 1];
        for (j, &x) in w.iter().enumerate() {
            next[j] = crate::logspace::log_add(next[j], x - h);
            next[j + 1] = crate::logspace::log_add(next[j + 1], x + h);
        }
        w = next;
    }
    w
}

/// Sector decomposition of one block with S-site fields.
#[derive(Clone, Debug)]
pub struct SectorSums {
    /// (k, log Z^{k/r}) over the summed window; empty in the Laplace regime.
    pub terms: Vec<(u128, f64)>,
    pub log_z: f64,
    /// The dimensionless normalizer `a`, summed over the whole positive half.
    pub log_a: f64,
    pub log_lambda_plus: f64,
    pub log_lambda_minus: f64,
    /// r·f(q⁺): add to `terms`, `log_z` and the λ logs for absolute values.
    pub reference: f64,
}

pub fn sector_sums(k: &BetaConstants, r: u128, fields: &[f64], y: i8) -> Result<SectorSums> {
    check_sign(y)?;
    let beta = k.beta;
    let t = fields.len();
    let profile = SectorProfile::new(k, r, beta * t as f64)?;
    let w = field_polynomial(fields);
    let mut z = LogAcc::default();
    for (j, wj) in w.iter().enumerate() {
        z.push(wj + profile.log_g(y, beta * (2.0 * j as f64 - t as f64)));
    }
    let rf = r as f64;
    let terms = profile
        .log_terms(y, 0.0)
        .into_iter()
        .map(|(kk, b)| {
            let x = (2.0 * kk as f64 - rf) / rf;
            (kk, b + fields.iter().map(|h| ln_2cosh(h + beta * x)).sum::<f64>())
        })
        .collect();
    let s = beta * k.m_plus();
    Ok(SectorSums {
        terms,
        log_z: z.value(),
        log_a: profile.log_g(1, 0.0),
        log_lambda_plus: fields.iter().map(|h| ln_2cosh(h + s)).sum(),
        log_lambda_minus: fields.iter().map(|h| ln_2cosh(h - s)).sum(),
        reference: rf * k.f_max(),
    })
}

/// ln[P(σ_S | phase y) / ∏ Q_i^y(σ_i)] for one block, indexed by the number
/// j of plus signs on S. The ratio depends on σ_S only through j.
pub fn conditional_product_log_ratios(k: &BetaConstants, r: u128, fields: &[f64], y: i8) -> Result<Vec<f64>> {
    let sums = sector_sums(k, r, fields, y)?;
    let beta = k.beta;
    let t = fields.len() as f64;
    let profile = SectorProfile::new(k, r, beta * t)?;
    let lam = if y > 0 { sums.log_lambda_plus } else { sums.log_lambda_minus };
    let ys = y as f64 * beta * k.m_plus();
    Ok((0..=fields.len())
        .map(|j| {
            let m = 2.0 * j as f64 - t;
            profile.log_g(y, beta * m) - ys * m + lam - sums.log_z
        })
        .collect())
}

fn check_sign(y: i8) -> Result<()> {
    if y == 1 || y == -1 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("phase {y} is not ±1")))
    }
}

fn check_phase(y: &[i8], m: usize) -> Result<()> {
    check_len(m, y.len())?;
    y.iter().try_for_each(|&s| check_sign(s))
}

/// |S_v^vertex| for a source field h.
pub fn vertex_multiplicity(k: &BetaConstants, h: f64) -> u64 {
    ((2.0 * h.abs() / k.m_plus()).ceil() as u64).max(1)
}

/// |S_v^u| for a source coupling J.
pub fn edge_multiplicity(k: &BetaConstants, gamma_tilde: f64, j: f64) -> u64 {
    let factor = 2f64.max(1.0 / ((gamma_tilde - 1.0) / 8.0).tanh());
    ((factor * j.abs() / (k.m_plus() * k.m_plus())).ceil() as u64).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBlock {
    pub to: usize,
    pub e: u64,
    /// Source coupling J_uv.
    pub j: f64,
    /// Weight on each matching edge.
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexPlan {
    pub id: usize,
    pub t0: u64,
    pub r: u128,
    pub h: f64,
    pub h_tilde: f64,
    pub blocks: Vec<EdgeBlock>,
}

impl VertexPlan {
    pub fn edge_sites(&self) -> u64 {
        self.blocks.iter().map(|b| b.e).sum()
    }

    /// |S_v| = t0 + Σ e.
    pub fn t(&self) -> u64 {
        self.t0 + self.edge_sites()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Multiplies the concentration lower bound on every block size.
    pub r_scale: f64,
    /// Uses this odd block size everywhere, ignoring all lower bounds.
    pub r_override: Option<u128>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            r_scale: 1.0,
            r_override: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GadgetPlan {
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub options: PlanOptions,
    pub vertices: Vec<VertexPlan>,
    pub consts: BetaConstants,
    pub source: IsingModel,
}

impl GadgetPlan {
    pub fn m(&self) -> usize {
        self.vertices.len()
    }

    /// Block sizes meet every lower bound of the guarantee.
    pub fn proof_valid(&self) -> bool {
        self.options.r_override.is_none() && self.options.r_scale >= 1.0
    }

    /// Per-block accuracy target ε/(5m).
    pub fn block_epsilon(&self) -> f64 {
        self.epsilon / (5.0 * self.m() as f64)
    }
}

fn check_options(opts: &PlanOptions) -> Result<()> {
    if !(opts.r_scale > 0.0 && opts.r_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("r_scale = {} must be positive", opts.r_scale)));
    }
    if let Some(r) = opts.r_override {
        if r % 2 == 0 {
            return Err(Error::InvalidArgument(format!("r override {r} must be odd")));
        }
    }
    Ok(())
}

pub fn plan(h: &IsingModel, gamma: f64, epsilon: f64, opts: &PlanOptions) -> Result<GadgetPlan> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("gamma = {gamma} must exceed 1")));
    }
    if !(epsilon > 0.0 && epsilon < 0.05) {
        return Err(Error::Domain(format!("epsilon = {epsilon} outside (0,0.05)")));
    }
    check_options(opts)?;
    let m = h.n();
    if m > MAX_SOURCE_VERTICES {
        return Err(Error::SizeGuard {
            what: "source vertices",
            value: m,
            limit: MAX_SOURCE_VERTICES,
        });
    }
    let gamma_tilde = gamma.min(2.0);
    let beta = (1.0 + gamma_tilde) / 2.0;
    let consts = scalar::solve_q_plus(beta)?;
    let mp = consts.m_plus();
    let mut vertices = Vec::with_capacity(m);
    for v in 0..m {
        let hv = h.h()[v];
        let t0 = vertex_multiplicity(&consts, hv);
        debug_assert!((hv / t0 as f64).tanh().abs() <= mp / 2.0 + 1e-12);
        let h_tilde = scalar::phi_vertex_inv(&consts, hv / t0 as f64)?;
        let mut blocks = Vec::new();
        for u in 0..m {
            let j = h.j(u, v);
            if u == v || j == 0.0 {
                continue;
            }
            let e = edge_multiplicity(&consts, gamma_tilde, j);
            debug_assert!((j / e as f64).tanh().abs() <= mp * mp / 2.0 + 1e-12);
            let w = scalar::phi_edge_inv(&consts, j / e as f64)?;
            blocks.push(EdgeBlock { to: u, e, j, w });
        }
        vertices.push(VertexPlan {
            id: v,
            t0,
            r: 1,
            h: hv,
            h_tilde,
            blocks,
        });
    }
    let eps0 = epsilon / (5.0 * m as f64);
    for vp in &mut vertices {
        let t = vp.t();
        vp.r = match opts.r_override {
            Some(r) => r,
            None => {
                let conc = scalar::choose_delta_r(&consts, t, eps0)?.r as f64 * opts.r_scale;
                let spectral = 8.0 * beta * t as f64 / (gamma_tilde - 1.0);
                scalar::odd_ceil(conc.max(spectral).max(t as f64))
            }
        };
    }
    Ok(GadgetPlan {
        gamma,
        gamma_tilde,
        beta,
        epsilon,
        options: opts.clone(),
        vertices,
        consts,
        source: h.clone(),
    })
}

/// One S site in layout order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    pub gadget: usize,
    pub field: f64,
    pub partner: Option<usize>,
    pub coupling: f64,
    pub is_vertex: bool,
}

#[derive(Clone, Debug)]
pub struct GadgetInstance {
    plan: GadgetPlan,
    zero_diagonal: bool,
    offsets: Vec<u128>,
    n_total: u128,
    sites: Vec<Site>,
    site_index: Vec<u128>,
    ranges: Vec<Range<usize>>,
    pairs: Vec<(usize, usize, f64)>,
    profiles: Vec<SectorProfile>,
    /// [gadget][0 → phase +1, 1 → phase −1][j plus signs on S_v]
    g: Vec<[Vec<f64>; 2]>,
    log_a_blocks: Vec<f64>,
    log_lambda: Vec<(f64, f64)>,
    log_a0: f64,
    log_a1: f64,
    log_a: f64,
    log_reference: f64,
}

fn phase_slot(y: i8) -> usize {
    if y > 0 {
        0
    } else {
        1
    }
}

pub fn materialize(plan: &GadgetPlan, zero_diagonal: bool) -> Result<GadgetInstance> {
    let mut plan = plan.clone();
    let beta = plan.beta;
    if zero_diagonal && plan.options.r_override.is_none() {
        for vp in &mut plan.vertices {
            let lift = scalar::odd_ceil(16.0 * beta * (vp.t() + 1) as f64 / (plan.gamma_tilde - 1.0));
            vp.r = vp.r.max(lift);
        }
    }
    let m = plan.m();
    let consts = plan.consts;
    let mp = consts.m_plus();
    let shift = if zero_diagonal { -0.5 * beta } else { 0.0 };

    let mut offsets = Vec::with_capacity(m);
    let mut n_total: u128 = 0;
    let mut sites = Vec::new();
    let mut site_index = Vec::new();
    let mut ranges = Vec::with_capacity(m);
    // (gadget, neighbor) → first site of the block S_gadget^neighbor
    let mut block_start = BTreeMap::new();
    for vp in &plan.vertices {
        offsets.push(n_total);
        let start = sites.len();
        for i in 0..vp.t0 {
            sites.push(Site {
                gadget: vp.id,
                field: vp.h_tilde,
                partner: None,
                coupling: 0.0,
                is_vertex: true,
            });
            site_index.push(n_total + i as u128);
        }
        let mut local = vp.t0 as u128;
        for b in &vp.blocks {
            block_start.insert((vp.id, b.to), sites.len());
            for _ in 0..b.e {
                sites.push(Site {
                    gadget: vp.id,
                    field: 0.0,
                    partner: None,
                    coupling: b.w,
                    is_vertex: false,
                });
                site_index.push(n_total + local);
                local += 1;
            }
        }
        ranges.push(start..sites.len());
        n_total = n_total
            .checked_add(vp.t() as u128 + vp.r)
            .ok_or_else(|| Error::InvalidArgument("vertex count overflows u128".into()))?;
    }
    let mut pairs = Vec::new();
    for vp in &plan.vertices {
        for b in &vp.blocks {
            if b.to < vp.id {
                continue;
            }
            let a0 = block_start[&(vp.id, b.to)];
            let b0 = block_start[&(b.to, vp.id)];
            for i in 0..b.e as usize {
                sites[a0 + i].partner = Some(b0 + i);
                sites[b0 + i].partner = Some(a0 + i);
                pairs.push((a0 + i, b0 + i, b.w));
            }
        }
    }

    let mut profiles = Vec::with_capacity(m);
    let mut g = Vec::with_capacity(m);
    let mut log_a_blocks = Vec::with_capacity(m);
    let mut log_lambda = Vec::with_capacity(m);
    let mut log_a0 = 0.0;
    let mut log_reference = 0.0;
    for vp in &plan.vertices {
        let t = vp.t();
        let profile = SectorProfile::new(&consts, vp.r, beta * t as f64)?;
        let table = |y: i8| -> Vec<f64> {
            (0..=t)
                .map(|j| profile.log_g(y, beta * (2.0 * j as f64 - t as f64)) + shift)
                .collect()
        };
        g.push([table(1), table(-1)]);
        let la = profile.log_g(1, 0.0);
        let te = vp.edge_sites() as f64;
        let t0 = vp.t0 as f64;
        let lp = t0 * ln_2cosh(vp.h_tilde + beta * mp) + te * ln_2cosh(beta * mp);
        let lm = t0 * ln_2cosh(vp.h_tilde - beta * mp) + te * ln_2cosh(beta * mp);
        log_a0 += la + 0.5 * (lp + lm) + shift;
        log_a_blocks.push(la);
        log_lambda.push((lp, lm));
        log_reference += vp.r as f64 * consts.f_max();
        profiles.push(profile);
    }
    let (qp, qm) = (consts.q_plus, consts.q_minus);
    let same = qp * qp + qm * qm;
    let cross = 2.0 * qp * qm;
    let mut log_a1 = 0.0;
    for vp in &plan.vertices {
        for b in vp.blocks.iter().filter(|b| b.to > vp.id) {
            let psi_p = (same * b.w.exp() + cross * (-b.w).exp()).ln();
            let psi_m = (same * (-b.w).exp() + cross * b.w.exp()).ln();
            log_a1 += 0.5 * b.e as f64 * (psi_p + psi_m);
        }
    }
    let trace: f64 = (0..m).map(|v| plan.source.j(v, v)).sum();
    let log_a = log_a0 + log_a1 - 0.5 * trace;
    Ok(GadgetInstance {
        plan,
        zero_diagonal,
        offsets,
        n_total,
        sites,
        site_index,
        ranges,
        pairs,
        profiles,
        g,
        log_a_blocks,
        log_lambda,
        log_a0,
        log_a1,
        log_a,
        log_reference,
    })
}

impl GadgetInstance {
    pub fn plan(&self) -> &GadgetPlan {
        &self.plan
    }

    pub fn source(&self) -> &IsingModel {
        &self.plan.source
    }

    pub fn consts(&self) -> &BetaConstants {
        &self.plan.consts
    }

    pub fn beta(&self) -> f64 {
        self.plan.beta
    }

    pub fn m(&self) -> usize {
        self.plan.m()
    }

    pub fn zero_diagonal(&self) -> bool {
        self.zero_diagonal
    }

    pub fn proof_valid(&self) -> bool {
        self.plan.proof_valid()
    }

    pub fn n_total(&self) -> u128 {
        self.n_total
    }

    /// N as a usize when it is small enough to hold a configuration.
    pub fn n_usize(&self) -> Result<usize> {
        usize::try_from(self.n_total)
            .ok()
            .filter(|&n| n <= 1 << 32)
            .ok_or(Error::SizeGuard {
                what: "instance size",
                value: usize::MAX,
                limit: 1 << 32,
            })
    }

    pub fn offsets(&self) -> &[u128] {
        &self.offsets
    }

    pub fn r(&self, v: usize) -> u128 {
        self.plan.vertices[v].r
    }

    pub fn t(&self, v: usize) -> u64 {
        self.plan.vertices[v].t()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Global vertex index of every S site.
    pub fn site_index(&self) -> &[u128] {
        &self.site_index
    }

    /// Range of S sites (into [`Self::sites`]) belonging to gadget v.
    pub fn site_range(&self, v: usize) -> Range<usize> {
        self.ranges[v].clone()
    }

    /// Global index range of R_v.
    pub fn r_range(&self, v: usize) -> Range<u128> {
        let s = self.offsets[v] + self.t(v) as u128;
        s..s + self.r(v)
    }

    pub fn pairs(&self) -> &[(usize, usize, f64)] {
        &self.pairs
    }

    pub fn profile(&self, v: usize) -> &SectorProfile {
        &self.profiles[v]
    }

    /// log Σ_{R_v in phase y} of the block weight given j plus signs on S_v,
    /// relative to r_v·f(q⁺) (zero-diagonal shift included).
    pub fn log_g(&self, v: usize, y: i8, j: usize) -> f64 {
        self.g[v][phase_slot(y)][j]
    }

    pub fn log_a_block(&self, v: usize) -> f64 {
        self.log_a_blocks[v]
    }

    pub fn log_lambda(&self, v: usize) -> (f64, f64) {
        self.log_lambda[v]
    }

    pub fn log_a0(&self) -> f64 {
        self.log_a0
    }

    pub fn log_a1(&self) -> f64 {
        self.log_a1
    }

    /// log A = log A₀ + log A₁ − ½·tr J_H, so that Z_𝓗(y) ≈ A·μ_H(y) with the
    /// source density taken including its diagonal.
    pub fn log_a(&self) -> f64 {
        self.log_a
    }

    /// Σ_v r_v·f(q⁺): every reported log-mass is relative to this.
    pub fn log_reference(&self) -> f64 {
        self.log_reference
    }

    /// log μ_H(y) of the source model.
    pub fn log_mu_source(&self, y: &[i8]) -> Result<f64> {
        check_phase(y, self.m())?;
        Ok(self.plan.source.energy_spins(y))
    }

    /// log of the vertex factor Q_i^y(s).
    pub fn log_q(&self, site: usize, y: i8, s: i8) -> f64 {
        let a = self.sites[site].field + y as f64 * self.plan.beta * self.plan.consts.m_plus();
        s as f64 * a - ln_2cosh(a)
    }

    pub fn phase_of_sector(&self, v: usize, k: u128) -> i8 {
        if 2 * k > self.r(v) {
            1
        } else {
            -1
        }
    }

    pub fn phase_readout(&self, sigma: &SpinConfiguration) -> Result<Vec<i8>> {
        let n = self.n_usize()?;
        check_len(n, sigma.len())?;
        Ok((0..self.m())
            .map(|v| {
                let rr = self.r_range(v);
                if sigma.magnetization(rr.start as usize, rr.end as usize) > 0 {
                    1
                } else {
                    -1
                }
            })
            .collect())
    }

    /// Restriction of a full configuration to 𝓢, in layout order.
    pub fn s_part(&self, sigma: &SpinConfiguration) -> Result<Vec<i8>> {
        check_len(self.n_usize()?, sigma.len())?;
        Ok(self.site_index.iter().map(|&i| sigma.get(i as usize)).collect())
    }

    /// Energy ½σᵀJ̃σ + h̃ᵀσ using per-block magnetizations.
    pub fn energy(&self, sigma: &SpinConfiguration) -> Result<f64> {
        let n = self.n_usize()?;
        check_len(n, sigma.len())?;
        let beta = self.plan.beta;
        let s: Vec<i8> = self.site_index.iter().map(|&i| sigma.get(i as usize)).collect();
        let mut e = self.s_energy(&s);
        for v in 0..self.m() {
            let rr = self.r_range(v);
            let mr = sigma.magnetization(rr.start as usize, rr.end as usize) as f64;
            let ms: f64 = self.ranges[v].clone().map(|i| s[i] as f64).sum();
            let r = self.r(v) as f64;
            e += beta / (2.0 * r) * mr * mr + beta / r * mr * ms;
            if self.zero_diagonal {
                e -= 0.5 * beta;
            }
        }
        Ok(e)
    }

    fn s_energy(&self, s: &[i8]) -> f64 {
        let mut e: f64 = self.sites.iter().zip(s).map(|(site, &x)| site.field * x as f64).sum();
        for &(a, b, w) in &self.pairs {
            e += w * (s[a] * s[b]) as f64;
        }
        e
    }

    /// Dense Ising model of the whole instance (small N only).
    pub fn dense_export(&self) -> Result<IsingModel> {
        if self.n_total > DENSE_EXPORT_LIMIT {
            return Err(Error::SizeGuard {
                what: "dense export size",
                value: self.n_total.min(usize::MAX as u128) as usize,
                limit: DENSE_EXPORT_LIMIT as usize,
            });
        }
        let n = self.n_total as usize;
        let mut j = vec![0.0; n * n];
        let mut h = vec![0.0; n];
        let beta = self.plan.beta;
        for v in 0..self.m() {
            let w = beta / self.r(v) as f64;
            let s: Vec<usize> = self.ranges[v].clone().map(|i| self.site_index[i] as usize).collect();
            let rr = self.r_range(v);
            let rs: Vec<usize> = (rr.start as usize..rr.end as usize).collect();
            for &a in &rs {
                for &b in &rs {
                    if a != b || !self.zero_diagonal {
                        j[a * n + b] = w;
                    }
                }
                for &b in &s {
                    j[a * n + b] = w;
                    j[b * n + a] = w;
                }
            }
        }
        for (i, site) in self.sites.iter().enumerate() {
            h[self.site_index[i] as usize] = site.field;
        }
        for &(a, b, w) in &self.pairs {
            let (a, b) = (self.site_index[a] as usize, self.site_index[b] as usize);
            j[a * n + b] = w;
            j[b * n + a] = w;
        }
        IsingModel::new(n, j, h)
    }

    fn check_s(&self, s: &[i8]) -> Result<()> {
        check_len(self.n_sites(), s.len())?;
        s.iter().try_for_each(|&x| check_sign(x))
    }

    /// log μ_𝓗(σ_S; y): the mass of configurations agreeing with σ_S on 𝓢
    /// whose phase vector is y, relative to [`Self::log_reference`].
    pub fn exact_pinned_mass(&self, s: &[i8], y: &[i8]) -> Result<f64> {
        self.check_s(s)?;
        check_phase(y, self.m())?;
        let mut total = self.s_energy(s);
        for v in 0..self.m() {
            let j = self.ranges[v].clone().filter(|&i| s[i] > 0).count();
            total += self.log_g(v, y[v], j);
        }
        Ok(total)
    }

    /// [`Self::exact_pinned_mass`] through elementary symmetric polynomials
    /// of the R-site weights (Newton's identities). Small blocks only.
    pub fn exact_pinned_mass_newton(&self, s: &[i8], y: &[i8]) -> Result<f64> {
        self.check_s(s)?;
        check_phase(y, self.m())?;
        let beta = self.plan.beta;
        let mut total = self.s_energy(s);
        for v in 0..self.m() {
            let r = self.r(v);
            if r > 64 {
                return Err(Error::SizeGuard {
                    what: "block size for the Newton path",
                    value: r as usize,
                    limit: 64,
                });
            }
            let r = r as usize;
            let rf = r as f64;
            let ms: f64 = self.ranges[v].clone().map(|i| s[i] as f64).sum();
            let hr = beta * ms / rf;
            let e = elementary_symmetric_newton(&vec![(2.0 * hr).exp(); r]);
            let mut acc = LogAcc::default();
            for (k, ek) in e.iter().enumerate() {
                if (2 * k > r) == (y[v] > 0) && *ek > 0.0 {
                    let x = 2.0 * k as f64 - rf;
                    acc.push(beta * x * x / (2.0 * rf) - rf * hr + ek.ln());
                }
            }
            total += acc.value() - rf * self.plan.consts.f_max();
            if self.zero_diagonal {
                total -= 0.5 * beta;
            }
        }
        Ok(total)
    }

    /// Product-form approximation to μ_𝓗(σ_T; y)/Z_Ĥ(y) and the matching
    /// estimate of μ_𝓗(σ_T; y). `pins[i]` fixes S site i when set.
    pub fn approx_pinned_mass(&self, pins: &[Option<i8>], y: &[i8]) -> Result<(f64, f64)> {
        check_len(self.n_sites(), pins.len())?;
        check_phase(y, self.m())?;
        let allowed = |i: usize| -> Vec<i8> {
            match pins[i] {
                Some(s) => vec![s],
                None => vec![1, -1],
            }
        };
        let mut g = 0.0;
        for (i, site) in self.sites.iter().enumerate() {
            if site.is_vertex {
                let yv = y[site.gadget];
                let terms: Vec<f64> = allowed(i).iter().map(|&s| self.log_q(i, yv, s)).collect();
                g += log_sum_exp(&terms);
            }
        }
        for &(a, b, w) in &self.pairs {
            let (ya, yb) = (y[self.sites[a].gadget], y[self.sites[b].gadget]);
            let mut terms = Vec::with_capacity(4);
            for &sa in &allowed(a) {
                for &sb in &allowed(b) {
                    terms.push(self.log_q(a, ya, sa) + self.log_q(b, yb, sb) + w * (sa * sb) as f64);
                }
            }
            g += log_sum_exp(&terms);
        }
        let field: f64 = self.plan.vertices.iter().zip(y).map(|(vp, &s)| vp.h * s as f64).sum();
        Ok((g, g + self.log_a0 + field))
    }

    /// log Σ over vertex sites of gadget v (with pins) of the block weight,
    /// indexed by the number of plus signs on its edge sites.
    pub(crate) fn vertex_marginal(&self, v: usize, y: i8, pins: &[Option<i8>]) -> Vec<f64> {
        let vp = &self.plan.vertices[v];
        let t = vp.t() as i64;
        let te = vp.edge_sites() as i64;
        let range = self.ranges[v].clone();
        let vert = range.start..range.start + vp.t0 as usize;
        let pinned_m: i64 = vert.clone().filter_map(|i| pins[i]).map(|s| s as i64).sum();
        let free = vert.filter(|&i| pins[i].is_none()).count() as i64;
        (0..=te)
            .map(|je| {
                let me = 2 * je - te;
                let mut acc = LogAcc::default();
                for jv in 0..=free {
                    let mv = pinned_m + 2 * jv - free;
                    let j = ((me + mv + t) / 2) as usize;
                    acc.push(ln_binom(free as u64, jv as u64) + vp.h_tilde * mv as f64 + self.log_g(v, y, j));
                }
                acc.value()
            })
            .collect()
    }

    /// Pair state weights over (plus count on u side, plus count on v side)
    /// for the e matched pairs between two gadgets, honoring pins.
    fn pair_block_table(&self, pairs: &[(usize, usize, f64)], pins: &[Option<i8>]) -> Vec<Vec<f64>> {
        let e = pairs.len();
        let mut table = vec![vec![f64::NEG_INFINITY; e + 1]; e + 1];
        table[0][0] = 0.0;
        for (step, &(a, b, w)) in pairs.iter().enumerate() {
            let mut next = vec![vec![f64::NEG_INFINITY; e + 1]; e + 1];
            for ja in 0..=step {
                for jb in 0..=step {
                    let cur = table[ja][jb];
                    if cur == f64::NEG_INFINITY {
                        continue;
                    }
                    for sa in [1i8, -1] {
                        if pins[a].is_some_and(|p| p != sa) {
                            continue;
                        }
                        for sb in [1i8, -1] {
                            if pins[b].is_some_and(|p| p != sb) {
                                continue;
                            }
                            let (na, nb) = (ja + (sa > 0) as usize, jb + (sb > 0) as usize);
                            next[na][nb] = crate::logspace::log_add(next[na][nb], cur + w * (sa * sb) as f64);
                        }
                    }
                }
            }
            table = next;
        }
        table
    }

    /// Exact log μ_𝓗(σ_T; y) relative to [`Self::log_reference`], summing
    /// out free S sites by dynamic programming over per-gadget edge counts.
    pub fn exact_log_mass(&self, pins: &[Option<i8>], y: &[i8]) -> Result<f64> {
        check_len(self.n_sites(), pins.len())?;
        check_phase(y, self.m())?;
        let m = self.m();
        let states: f64 = self.plan.vertices.iter().map(|vp| (vp.edge_sites() + 1) as f64).product();
        if states > EXACT_STATE_LIMIT as f64 {
            return Err(Error::SizeGuard {
                what: "exact phase-mass state space",
                value: states.min(usize::MAX as f64) as usize,
                limit: EXACT_STATE_LIMIT,
            });
        }
        let mut by_edge: BTreeMap<(usize, usize), Vec<(usize, usize, f64)>> = BTreeMap::new();
        for &p in &self.pairs {
            by_edge.entry((self.sites[p.0].gadget, self.sites[p.1].gadget)).or_default().push(p);
        }
        let mut dp: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        dp.insert(vec![0; m], 0.0);
        for ((u, v), ps) in &by_edge {
            let table = self.pair_block_table(ps, pins);
            let mut next: BTreeMap<Vec<u32>, LogAcc> = BTreeMap::new();
            for (state, w) in &dp {
                for (ja, row) in table.iter().enumerate() {
                    for (jb, &x) in row.iter().enumerate() {
                        if x == f64::NEG_INFINITY {
                            continue;
                        }
                        let mut s = state.clone();
                        s[*u] += ja as u32;
                        s[*v] += jb as u32;
                        next.entry(s).or_default().push(w + x);
                    }
                }
            }
            dp = next.into_iter().map(|(k, acc)| (k, acc.value())).collect();
        }
        let marg: Vec<Vec<f64>> = (0..m).map(|v| self.vertex_marginal(v, y[v], pins)).collect();
        let mut total = LogAcc::default();
        for (state, w) in &dp {
            let mut x = *w;
            for v in 0..m {
                x += marg[v][state[v] as usize];
            }
            total.push(x);
        }
        Ok(total.value())
    }

    /// Exact log Z_𝓗(y) relative to [`Self::log_reference`].
    pub fn exact_log_z_phase(&self, y: &[i8]) -> Result<f64> {
        self.exact_log_mass(&vec![None; self.n_sites()], y)
    }

    /// Exact log Z_Ĥ(y): the same without matching edges, a product of
    /// per-block sector sums.
    pub fn log_z_unmatched(&self, y: &[i8]) -> Result<f64> {
        check_phase(y, self.m())?;
        let mut total = 0.0;
        for (v, vp) in self.plan.vertices.iter().enumerate() {
            let mut fields = vec![vp.h_tilde; vp.t0 as usize];
            fields.resize(vp.t() as usize, 0.0);
            let w = field_polynomial(&fields);
            let mut acc = LogAcc::default();
            for (j, wj) in w.iter().enumerate() {
                acc.push(wj + self.log_g(v, y[v], j));
            }
            total += acc.value();
        }
        Ok(total)
    }

    /// max_i Σ_{j≠i} |J̃_ij| + |h̃_i|.
    pub fn width(&self) -> f64 {
        let beta = self.plan.beta;
        let mut w: f64 = 0.0;
        for site in &self.sites {
            w = w.max(beta + site.coupling.abs() + site.field.abs());
        }
        for v in 0..self.m() {
            let r = self.r(v) as f64;
            w = w.max(beta * (r - 1.0 + self.t(v) as f64) / r);
        }
        w
    }

    /// (λ_min, λ_max) of J̃, from its restriction to span{e_i : i ∈ 𝓢} ∪
    /// {𝟙_{R_v}/√r_v}; the orthogonal complement inside each R_v carries the
    /// single eigenvalue 0 (−β/r_v without the diagonal).
    pub fn eigen_extremes(&self) -> (f64, f64) {
        let ns = self.n_sites();
        let m = self.m();
        let d = ns + m;
        let beta = self.plan.beta;
        let cross: Vec<f64> = (0..m).map(|v| beta / (self.r(v) as f64).sqrt()).collect();
        let diag: Vec<f64> = (0..m)
            .map(|v| {
                if self.zero_diagonal {
                    beta - beta / self.r(v) as f64
                } else {
                    beta
                }
            })
            .collect();
        let (mut lo, mut hi) = if d <= DENSE_EIGEN_LIMIT {
            let mut a = vec![0.0; d * d];
            for &(x, y, w) in &self.pairs {
                a[x * d + y] = w;
                a[y * d + x] = w;
            }
            for v in 0..m {
                let u = ns + v;
                a[u * d + u] = diag[v];
                for i in self.ranges[v].clone() {
                    a[i * d + u] = cross[v];
                    a[u * d + i] = cross[v];
                }
            }
            spectral::dense_extremes(d, &a)
        } else {
            let matvec = |x: &[f64], out: &mut [f64]| {
                out.iter_mut().for_each(|o| *o = 0.0);
                for &(a, b, w) in &self.pairs {
                    out[a] += w * x[b];
                    out[b] += w * x[a];
                }
                for v in 0..m {
                    let u = ns + v;
                    let mut s = 0.0;
                    for i in self.ranges[v].clone() {
                        out[i] += cross[v] * x[u];
                        s += x[i];
                    }
                    out[u] += cross[v] * s + diag[v] * x[u];
                }
            };
            spectral::lanczos_extremes(d, matvec, 1e-10, 0x5eed)
        };
        for v in 0..m {
            if self.r(v) > 1 {
                let c = if self.zero_diagonal { -beta / self.r(v) as f64 } else { 0.0 };
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
        (lo, hi)
    }

    pub fn spectral_width(&self) -> f64 {
        let (lo, hi) = self.eigen_extremes();
        hi - lo
    }

    pub fn to_file(&self) -> Result<InstanceFile> {
        let source = self.plan.source.to_file();
        Ok(InstanceFile {
            version: FILE_VERSION,
            beta: self.plan.beta,
            gamma: self.plan.gamma,
            epsilon: self.plan.epsilon,
            r_scale: self.plan.options.r_scale,
            r_override: self.plan.options.r_override,
            zero_diagonal: self.zero_diagonal,
            log_a0: self.log_a0,
            log_a1: self.log_a1,
            log_a: self.log_a,
            log_reference: self.log_reference,
            n_total: self.n_total,
            vertices: self.plan.vertices.clone(),
            layout: self.offsets.clone(),
            provenance: provenance_hash(&self.plan.source)?,
            proof_valid: self.proof_valid(),
            source,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(crate::jsonfmt::to_string(&self.to_file()?)?)
    }

    pub fn from_file(f: &InstanceFile) -> Result<Self> {
        if f.version != FILE_VERSION {
            return Err(Error::Format(format!("unsupported instance version {}", f.version)));
        }
        let source = IsingModel::from_file(&f.source)?;
        if provenance_hash(&source)? != f.provenance {
            return Err(Error::Format("provenance hash does not match the source model".into()));
        }
        let gamma_tilde = f.gamma.min(2.0);
        let beta = (1.0 + gamma_tilde) / 2.0;
        let plan = GadgetPlan {
            gamma: f.gamma,
            gamma_tilde,
            beta,
            epsilon: f.epsilon,
            options: PlanOptions {
                r_scale: f.r_scale,
                r_override: f.r_override,
            },
            vertices: f.vertices.clone(),
            consts: scalar::solve_q_plus(beta)?,
            source,
        };
        let inst = materialize(&plan, f.zero_diagonal)?;
        if inst.offsets != f.layout || (inst.log_a - f.log_a).abs() > 1e-9 * (1.0 + f.log_a.abs()) {
            return Err(Error::Format("instance file is inconsistent with its plan".into()));
        }
        Ok(inst)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(s)?)
    }
}

/// sha256 of the source model's canonical JSON.
pub fn provenance_hash(model: &IsingModel) -> Result<String> {
    let json = model.to_json()?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub version: u32,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub r_scale: f64,
    pub r_override: Option<u128>,
    pub zero_diagonal: bool,
    #[serde(rename = "logA0")]
    pub log_a0: f64,
    #[serde(rename = "logA1")]
    pub log_a1: f64,
    #[serde(rename = "logA")]
    pub log_a: f64,
    pub log_reference: f64,
    pub n_total: u128,
    pub vertices: Vec<VertexPlan>,
    pub layout: Vec<u128>,
    pub provenance: String,
    pub proof_valid: bool,
    pub source: ModelFile,
}

/// e_0..e_n of `w` by Newton's identities from power sums.
pub fn elementary_symmetric_newton(w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let p: Vec<f64> = (0..=n).map(|j| w.iter().map(|x| x.powi(j as i32)).sum()).collect();
    let mut e = vec![0.0; n + 1];
    e[0] = 1.0;
    for k in 1..=n {
        let mut s = 0.0;
        for i in 1..=k {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            s += sign * e[k - i] * p[i];
        }
        e[k] = s / k as f64;
    }
    e
}

/// e_0..e_n of `w` by the product recurrence ∏(1 + w_i z).
pub fn elementary_symmetric(w: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; w.len() + 1];
    e[0] = 1.0;
    for (i, &x) in w.iter().enumerate() {
        for k in (1..=i + 1).rev() {
            e[k] += x * e[k - 1];
        }
    }
    e
}

/// Rounds every entry to the nearest multiple of 1/M.
pub fn quantize(model: &IsingModel, levels: u64) -> Result<IsingModel> {
    if levels == 0 {
        return Err(Error::InvalidArgument("quantization levels must be at least 1".into()));
    }
    let mf = levels as f64;
    let round = |x: f64| (x * mf).round() / mf;
    let n = model.n();
    let j: Vec<f64> = model.j_matrix().iter().map(|&x| round(x)).collect();
    let h: Vec<f64> = model.h().iter().map(|&x| round(x)).collect();
    let mut out = IsingModel::new(n, j, h)?;
    out.meta = model.meta.clone();
    out.meta.insert("quantization_levels".into(), levels.into());
    let bound = 2.0 * (n * n) as f64 / mf;
    out.meta.insert("log_density_ratio_bound".into(), bound.into());
    Ok(out)
}

/// Every ±1 vector of length m, index bit i ↦ coordinate i.
pub fn all_phases(m: usize) -> Result<Vec<Vec<i8>>> {
    if m > 20 {
        return Err(Error::SizeGuard {
            what: "phase enumeration length",
            value: m,
            limit: 20,
        });
    }
    Ok((0..1u64 << m)
        .map(|x| (0..m).map(|i| if x >> i & 1 == 1 { 1 } else { -1 }).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::{brute_force_table, pushforward};

    fn k15() -> BetaConstants {
        scalar::solve_q_plus(1.5).unwrap()
    }

    #[test]
    fn single_block_three_sites() {
        let k = k15();
        let s = sector_sums(&k, 3, &[], 1).unwrap();
        let z = (s.log_z + s.reference).exp();
        assert!((z - (3.0 * 0.25f64.exp() + 2.25f64.exp())).abs() < 1e-9, "{z}");
        assert!((z - 13.33981209).abs() < 1e-7);
        let sm = sector_sums(&k, 3, &[], -1).unwrap();
        assert!((s.log_z - sm.log_z).abs() < 1e-14);
        assert_eq!(s.log_lambda_plus, s.log_lambda_minus);
    }

    #[test]
    fn regimes_agree_at_their_borders() {
        let k = k15();
        for &r in &[169u128, 171, 2001, 200_001] {
            let p = SectorProfile::new(&k, r, 3.0).unwrap();
            let mut acc = LogAcc::default();
            let rf = r as f64;
            for kk in (r + 1) / 2..=r {
                let x = (2.0 * kk as f64 - rf) / rf;
                acc.push(ln_binom(r as u64, kk as u64) + 0.5 * 1.5 * rf * x * x + 2.0 * x - rf * k.f_max());
            }
            let rel = (p.log_g(1, 2.0) - acc.value()).abs();
            assert!(rel < 1e-7, "r={r}: {rel}");
        }
        let big = 9_999_999_999u128;
        let w = SectorProfile::new(&k, big, 3.0).unwrap();
        let l = SectorProfile::Laplace {
            r: big,
            q: k.q_plus,
            curvature: 2.0 * k.c1,
        };
        for c in [-3.0, 0.0, 1.5] {
            assert!((w.log_g(1, c) - l.log_g(1, c)).abs() < 1e-8);
            assert!((w.log_g(-1, c) - l.log_g(-1, c)).abs() < 1e-8);
        }
    }

    #[test]
    fn plan_examples() {
        let k = k15();
        assert_eq!(vertex_multiplicity(&k, 1.0), 3);
        assert_eq!(edge_multiplicity(&k, 2.0, 0.5), 6);
        assert_eq!(vertex_multiplicity(&k, 0.0), 1);
        assert_eq!(edge_multiplicity(&k, 2.0, 0.0), 1);
        let h = IsingModel::zeros(2);
        let p = plan(&h, 2.0, 0.01, &PlanOptions::default()).unwrap();
        assert!(p.vertices.iter().all(|v| v.t0 == 1 && v.h_tilde == 0.0 && v.blocks.is_empty()));
        assert!(p.vertices.iter().all(|v| v.r % 2 == 1));
        assert!(plan(&h, 1.0, 0.01, &PlanOptions::default()).is_err());
        assert!(plan(&h, 2.0, 0.05, &PlanOptions::default()).is_err());
    }

    #[test]
    fn tiny_layout() {
        let h = IsingModel::zeros(1);
        let opts = PlanOptions {
            r_scale: 1.0,
            r_override: Some(3),
        };
        let inst = materialize(&plan(&h, 2.0, 0.01, &opts).unwrap(), false).unwrap();
        assert_eq!(inst.n_total(), 4);
        assert_eq!(inst.log_a1(), 0.0);
        let s = SpinConfiguration::from_spins(&[1, 1, 1, -1]).unwrap();
        assert_eq!(inst.phase_readout(&s).unwrap(), vec![1]);
        assert_eq!(inst.phase_readout(&s.flipped()).unwrap(), vec![-1]);
    }

    fn micro() -> GadgetInstance {
        let mut h = IsingModel::new(2, vec![0.0, 0.3, 0.3, 0.0], vec![0.2, -0.1]).unwrap();
        h.meta.insert("name".into(), "micro".into());
        let opts = PlanOptions {
            r_scale: 1.0,
            r_override: Some(5),
        };
        materialize(&plan(&h, 2.0, 0.01, &opts).unwrap(), false).unwrap()
    }

    #[test]
    fn structured_energy_matches_dense() {
        use rand::SeedableRng;
        let inst = micro();
        let dense = inst.dense_export().unwrap();
        assert!(dense.is_symmetric());
        let n = inst.n_usize().unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            let c = SpinConfiguration::from_spins(&s).unwrap();
            assert!((inst.energy(&c).unwrap() - dense.energy(&c).unwrap()).abs() < 1e-9);
        }
        let (lo, hi) = inst.eigen_extremes();
        let (dlo, dhi) = dense.eigen_extremes();
        assert!((lo - dlo).abs() < 1e-9 && (hi - dhi).abs() < 1e-9);
        assert!((inst.width() - dense.width()).abs() < 1e-12);
    }

    #[test]
    fn exact_masses_match_brute_force() {
        let inst = micro();
        let n = inst.n_usize().unwrap();
        assert!(n <= 20);
        let table = brute_force_table(&inst.dense_export().unwrap()).unwrap();
        let ns = inst.n_sites();
        let m = inst.m();
        let phases = pushforward(&table, m, |c| {
            SpinConfiguration::from_spins(&inst.phase_readout(c).unwrap()).unwrap()
        })
        .unwrap();
        for y in all_phases(m).unwrap() {
            let yi = SpinConfiguration::from_spins(&y).unwrap().index() as usize;
            let brute = phases.log_mass[yi] - inst.log_reference();
            let exact = inst.exact_log_z_phase(&y).unwrap();
            assert!((brute - exact).abs() < 1e-9, "{brute} vs {exact}");
            let mut acc = LogAcc::default();
            for x in 0..1u64 << ns {
                let s: Vec<i8> = (0..ns).map(|i| if x >> i & 1 == 1 { 1 } else { -1 }).collect();
                let a = inst.exact_pinned_mass(&s, &y).unwrap();
                let b = inst.exact_pinned_mass_newton(&s, &y).unwrap();
                assert!((a - b).abs() < 1e-9);
                acc.push(a);
            }
            assert!((acc.value() - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn elementary_symmetric_paths() {
        assert_eq!(elementary_symmetric_newton(&[1.0, 1.0]), vec![1.0, 2.0, 1.0]);
        let w = [0.3, 1.7, 0.9, 2.2, 0.5];
        let a = elementary_symmetric_newton(&w);
        let b = elementary_symmetric(&w);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn vertex_factor_value() {
        let inst = micro();
        let k = inst.consts().q_plus;
        let edge = inst.sites().iter().position(|s| !s.is_vertex).unwrap();
        assert!((inst.log_q(edge, 1, 1).exp() - k).abs() < 1e-14);
        assert!((inst.log_q(edge, 1, -1).exp() - (1.0 - k)).abs() < 1e-14);
    }

    #[test]
    fn instance_json_round_trip() {
        let inst = micro();
        let json = inst.to_json().unwrap();
        let back = GadgetInstance::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn quantize_rounds() {
        let m = IsingModel::new(2, vec![0.0, 1.26, 1.26, 0.0], vec![0.49, -0.2]).unwrap();
        let q = quantize(&m, 4).unwrap();
        assert_eq!(q.j(0, 1), 1.25);
        assert_eq!(q.h(), &[0.5, -0.25]);
        let i = IsingModel::new(1, vec![0.0], vec![2.0]).unwrap();
        assert_eq!(quantize(&i, 1).unwrap().h(), i.h());
    }
}
