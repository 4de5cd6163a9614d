//! Mean-field free energy of a Curie-Weiss block, its near-critical maximizer,
//! and the weight maps used to set gadget fields and couplings.

use serde::Serialize;

use crate::error::{Error, Result};

fn check_alpha(a: f64) -> Result<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha = {a} outside (0,1)")))
    }
}

/// Binary entropy in nats.
pub fn entropy(a: f64) -> Result<f64> {
    check_alpha(a)?;
    Ok(-a * a.ln() - (1.0 - a) * (1.0 - a).ln())
}

pub fn f_beta(beta: f64, a: f64) -> Result<f64> {
    Ok(entropy(a)? + 0.5 * beta * (2.0 * a - 1.0).powi(2))
}

pub fn f1(beta: f64, a: f64) -> Result<f64> {
    check_alpha(a)?;
    Ok(((1.0 - a) / a).ln() + 2.0 * beta * (2.0 * a - 1.0))
}

pub fn f2(beta: f64, a: f64) -> Result<f64> {
    check_alpha(a)?;
    Ok(-1.0 / (a * (1.0 - a)) + 4.0 * beta)
}

pub fn f3(a: f64) -> Result<f64> {
    check_alpha(a)?;
    Ok(1.0 / (a * a) - 1.0 / ((1.0 - a) * (1.0 - a)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaConstants {
    pub beta: f64,
    pub q_plus: f64,
    pub q_minus: f64,
    pub alpha_plus: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub delta0: f64,
}

impl BetaConstants {
    /// 2q⁺ − 1, the magnetization of the positive phase.
    pub fn m_plus(&self) -> f64 {
        2.0 * self.q_plus - 1.0
    }

    /// Free energy at either maximizer.
    pub fn f_max(&self) -> f64 {
        f_beta(self.beta, self.q_plus).expect("q_plus inside (0,1)")
    }
}

pub const GRID_POINTS: usize = 10_000;
pub const C2_SAFETY: f64 = 1.1;

pub fn solve_q_plus(beta: f64) -> Result<BetaConstants> {
    if !(beta > 1.0 && beta <= 2.0) {
        return Err(Error::Domain(format!("beta = {beta} outside (1,2]")));
    }
    let alpha_plus = 0.5 * (1.0 + (1.0 - 1.0 / beta).sqrt());
    // f′ is strictly decreasing on [α₊, 1): positive at α₊, → −∞ at 1.
    let mut lo = alpha_plus;
    let mut hi = 1.0 - 1e-14;
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let d = f1(beta, mid)?;
        if d.abs() < 1e-13 || hi - lo < 1e-16 {
            break;
        }
        if d > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = mid;
    let c1 = -0.5 * f2(beta, q)?;
    let d0p = ((1.0 - q) / 2.0).min((q - alpha_plus) / 2.0);
    let mut max3: f64 = 0.0;
    for i in 0..GRID_POINTS {
        let a = q - d0p + 2.0 * d0p * i as f64 / (GRID_POINTS - 1) as f64;
        max3 = max3.max(f3(a)?.abs());
    }
    let c2 = C2_SAFETY * max3 / 6.0;
    let c = 3.0 * c1 / 8.0;
    let delta0 = d0p.min(c1 / (3.0 * c2)).min(q - 0.5).min(1.0 - q);
    Ok(BetaConstants {
        beta,
        q_plus: q,
        q_minus: 1.0 - q,
        alpha_plus,
        c1,
        c2,
        c,
        delta0,
    })
}

pub fn phi_vertex(k: &BetaConstants, h: f64) -> f64 {
    let s = k.beta * k.m_plus();
    0.5 * (crate::logspace::ln_cosh(h + s) - crate::logspace::ln_cosh(h - s))
}

pub fn phi_edge(k: &BetaConstants, w: f64) -> f64 {
    let (qp, qm) = (k.q_plus, k.q_minus);
    let same = qp * qp + qm * qm;
    let cross = 2.0 * qp * qm;
    let num = same * w.exp() + cross * (-w).exp();
    let den = same * (-w).exp() + cross * w.exp();
    0.5 * (num / den).ln()
}

pub fn phi_vertex_inv(k: &BetaConstants, h: f64) -> Result<f64> {
    let bound = k.m_plus();
    let t = h.tanh();
    if t.abs() >= bound {
        return Err(Error::Domain(format!("|tanh({h})| = {} not below 2q⁺−1 = {bound}", t.abs())));
    }
    Ok((t / bound).atanh())
}

pub fn phi_edge_inv(k: &BetaConstants, w: f64) -> Result<f64> {
    let bound = k.m_plus() * k.m_plus();
    let t = w.tanh();
    if t.abs() >= bound {
        return Err(Error::Domain(format!("|tanh({w})| = {} not below (2q⁺−1)² = {bound}", t.abs())));
    }
    Ok((t / bound).atanh())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaR {
    pub delta: f64,
    pub r: u128,
}

/// Smallest odd integer at least `x` (and at least 1). Saturates at `u128::MAX`.
pub fn odd_ceil(x: f64) -> u128 {
    let r = x.ceil().max(1.0) as u128;
    if r == u128::MAX {
        return r;
    }
    if r % 2 == 0 {
        r + 1
    } else {
        r
    }
}

/// Window half-width and block size that make one gadget `eps`-accurate.
pub fn choose_delta_r(k: &BetaConstants, t: u64, eps: f64) -> Result<DeltaR> {
    if !(eps > 0.0 && eps <= 0.05) {
        return Err(Error::Domain(format!("epsilon = {eps} outside (0,0.05]")));
    }
    if t == 0 {
        return Err(Error::Domain("t must be at least 1".into()));
    }
    let b = k.beta;
    let t = t as f64;
    let delta = (eps / (24.0 * b * t)).min(k.delta0);
    let dc = delta * delta * k.c;
    let bound = (20.0 * b * t / dc)
        .max(2.0 * (10.0 / eps).ln() / dc)
        .max(1.0 / delta)
        .max(10.0);
    Ok(DeltaR {
        delta,
        r: odd_ceil(bound),
    })
}
