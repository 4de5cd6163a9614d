//! Ising models, exact small-instance oracles, and measure operations.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{check_len, Error, Result};
use crate::logspace::log_sum_exp;
use crate::spectral;
use crate::spin::SpinConfiguration;

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const BRUTE_FORCE_LIMIT: usize = 24;
pub const DENSE_EIGEN_LIMIT: usize = 2000;

/// Density proportional to exp(½⟨x,Jx⟩ + ⟨h,x⟩) on {±1}ⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingModel {
    n: usize,
    j: Vec<f64>,
    h: Vec<f64>,
    pub meta: Map<String, Value>,
}

impl IsingModel {
    /// Takes a row-major n×n matrix; asymmetric input is symmetrized.
    pub fn new(n: usize, j: Vec<f64>, h: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("model needs at least one vertex".into()));
        }
        check_len(n * n, j.len())?;
        check_len(n, h.len())?;
        if j.iter().chain(&h).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        let mut j = j;
        for a in 0..n {
            for b in 0..a {
                let s = 0.5 * (j[a * n + b] + j[b * n + a]);
                j[a * n + b] = s;
                j[b * n + a] = s;
            }
        }
        Ok(IsingModel {
            n,
            j,
            h,
            meta: Map::new(),
        })
    }

    pub fn zeros(n: usize) -> Self {
        IsingModel::new(n, vec![0.0; n * n], vec![0.0; n]).expect("n > 0")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn j(&self, a: usize, b: usize) -> f64 {
        self.j[a * self.n + b]
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn j_matrix(&self) -> &[f64] {
        &self.j
    }

    /// Adds `w` to both (a,b) and (b,a); once on the diagonal.
    pub fn add_coupling(&mut self, a: usize, b: usize, w: f64) {
        self.j[a * self.n + b] += w;
        if a != b {
            self.j[b * self.n + a] += w;
        }
    }

    pub fn set_coupling(&mut self, a: usize, b: usize, w: f64) {
        self.j[a * self.n + b] = w;
        self.j[b * self.n + a] = w;
    }

    pub fn add_field(&mut self, a: usize, w: f64) {
        self.h[a] += w;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|a| (0..a).all(|b| (self.j(a, b) - self.j(b, a)).abs() <= SYMMETRY_TOL))
    }

    pub fn energy(&self, s: &SpinConfiguration) -> Result<f64> {
        check_len(self.n, s.len())?;
        let x = s.spins();
        Ok(self.energy_spins(&x))
    }

    pub fn energy_spins(&self, x: &[i8]) -> f64 {
        let n = self.n;
        let mut quad = 0.0;
        let mut lin = 0.0;
        for a in 0..n {
            let xa = x[a] as f64;
            let row = &self.j[a * n..(a + 1) * n];
            let mut acc = 0.0;
            for b in 0..n {
                acc += row[b] * x[b] as f64;
            }
            quad += xa * acc;
            lin += self.h[a] * xa;
        }
        0.5 * quad + lin
    }

    pub fn tilt(&self, w: &[f64]) -> Result<IsingModel> {
        check_len(self.n, w.len())?;
        let mut out = self.clone();
        for (h, d) in out.h.iter_mut().zip(w) {
            *h += d;
        }
        Ok(out)
    }

    pub fn pin(&self, set: &[usize], tau: &[i8]) -> Result<Pinned> {
        check_len(set.len(), tau.len())?;
        let mut fixed = vec![None; self.n];
        for (&i, &t) in set.iter().zip(tau) {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!("pinned index {i} out of range")));
            }
            if t != 1 && t != -1 {
                return Err(Error::InvalidArgument(format!("pinned spin {t} is not ±1")));
            }
            fixed[i] = Some(t as f64);
        }
        let free: Vec<usize> = (0..self.n).filter(|&i| fixed[i].is_none()).collect();
        let mut offset = 0.0;
        for a in 0..self.n {
            if let Some(ta) = fixed[a] {
                offset += self.h[a] * ta;
                for b in 0..self.n {
                    if let Some(tb) = fixed[b] {
                        offset += 0.5 * self.j(a, b) * ta * tb;
                    }
                }
            }
        }
        let k = free.len();
        let model = if k == 0 {
            None
        } else {
            let mut j = vec![0.0; k * k];
            let mut h = vec![0.0; k];
            for (p, &a) in free.iter().enumerate() {
                h[p] = self.h[a];
                for b in 0..self.n {
                    if let Some(tb) = fixed[b] {
                        h[p] += self.j(a, b) * tb;
                    }
                }
                for (q, &b) in free.iter().enumerate() {
                    j[p * k + q] = self.j(a, b);
                }
            }
            Some(IsingModel::new(k, j, h)?)
        };
        Ok(Pinned {
            model,
            offset,
            free,
        })
    }

    /// max over rows of off-diagonal |J| mass plus |h|.
    pub fn width(&self) -> f64 {
        (0..self.n)
            .map(|a| (0..self.n).filter(|&b| b != a).map(|b| self.j(a, b).abs()).sum::<f64>() + self.h[a].abs())
            .fold(0.0, f64::max)
    }

    pub fn eigen_extremes(&self) -> (f64, f64) {
        if self.n <= DENSE_EIGEN_LIMIT {
            spectral::dense_extremes(self.n, &self.j)
        } else {
            let n = self.n;
            spectral::lanczos_extremes(
                n,
                |x, y| {
                    for a in 0..n {
                        y[a] = self.j[a * n..(a + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
                    }
                },
                1e-10,
                n as u64,
            )
        }
    }

    pub fn spectral_width(&self) -> f64 {
        let (lo, hi) = self.eigen_extremes();
        hi - lo
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.j.iter().chain(&self.h).fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn to_file(&self) -> ModelFile {
        let mut lower = Vec::with_capacity(self.n * (self.n + 1) / 2);
        for a in 0..self.n {
            for b in 0..=a {
                lower.push(self.j(a, b));
            }
        }
        ModelFile {
            n: self.n,
            j: lower,
            h: self.h.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_file(f: &ModelFile) -> Result<Self> {
        check_len(f.n * (f.n + 1) / 2, f.j.len())?;
        let n = f.n;
        let mut j = vec![0.0; n * n];
        let mut idx = 0;
        for a in 0..n {
            for b in 0..=a {
                j[a * n + b] = f.j[idx];
                j[b * n + a] = f.j[idx];
                idx += 1;
            }
        }
        let mut m = IsingModel::new(n, j, f.h.clone())?;
        m.meta = f.meta.clone();
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(crate::jsonfmt::to_string(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        IsingModel::from_file(&serde_json::from_str(s)?)
    }
}

/// On-disk model: J as the row-major lower triangle including the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    #[serde(rename = "J")]
    pub j: Vec<f64>,
    pub h: Vec<f64>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

/// Conditional model on the free vertices; `offset` restores the full energy.
#[derive(Clone, Debug)]
pub struct Pinned {
    pub model: Option<IsingModel>,
    pub offset: f64,
    pub free: Vec<usize>,
}

/// Log-domain masses of all 2ⁿ configurations, indexed as in
/// [`SpinConfiguration::from_index`].
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionTable {
    pub n: usize,
    pub log_mass: Vec<f64>,
    pub log_z: f64,
}

impl DistributionTable {
    pub fn from_log_masses(n: usize, log_mass: Vec<f64>) -> Result<Self> {
        guard(n)?;
        check_len(1usize << n, log_mass.len())?;
        let log_z = log_sum_exp(&log_mass);
        Ok(DistributionTable { n, log_mass, log_z })
    }

    pub fn from_probs(n: usize, probs: &[f64]) -> Result<Self> {
        DistributionTable::from_log_masses(n, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn prob(&self, index: usize) -> f64 {
        (self.log_mass[index] - self.log_z).exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_mass.iter().map(|l| (l - self.log_z).exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_mass.is_empty()
    }

    /// Normalized histogram of indices.
    pub fn empirical(n: usize, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        DistributionTable::from_probs(n, &probs)
    }
}

fn guard(n: usize) -> Result<()> {
    if n > BRUTE_FORCE_LIMIT {
        Err(Error::SizeGuard {
            what: "n",
            value: n,
            limit: BRUTE_FORCE_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// Enumerates every configuration in Gray-code order with O(n) updates.
pub fn brute_force_table(model: &IsingModel) -> Result<DistributionTable> {
    let n = model.n();
    guard(n)?;
    let mut x = vec![-1i8; n];
    let mut local: Vec<f64> = (0..n).map(|a| -(0..n).map(|b| model.j(a, b)).sum::<f64>()).collect();
    let mut e = model.energy_spins(&x);
    let size = 1usize << n;
    let mut log_mass = vec![0.0; size];
    let mut gray = 0usize;
    log_mass[0] = e;
    for step in 1..size {
        let i = step.trailing_zeros() as usize;
        let old = x[i] as f64;
        // ΔE from flipping i: −2 x_i (Σ_{b≠i} J_ib x_b + h_i)
        let field = local[i] - model.j(i, i) * old + model.h()[i];
        e += -2.0 * old * field;
        x[i] = -x[i];
        for (b, l) in local.iter_mut().enumerate() {
            *l += model.j(b, i) * (-2.0 * old);
        }
        gray ^= 1 << i;
        log_mass[gray] = e;
    }
    DistributionTable::from_log_masses(n, log_mass)
}

pub fn tv_distance(p: &DistributionTable, q: &DistributionTable) -> Result<f64> {
    if p.n != q.n || p.len() != q.len() {
        return Err(Error::InvalidArgument(format!("tables over n={} and n={}", p.n, q.n)));
    }
    let s: f64 = p
        .log_mass
        .iter()
        .zip(&q.log_mass)
        .map(|(a, b)| ((a - p.log_z).exp() - (b - q.log_z).exp()).abs())
        .sum();
    Ok((0.5 * s).min(1.0))
}

/// Image measure under `f`, whose outputs have length `n_out`.
pub fn pushforward<F>(p: &DistributionTable, n_out: usize, f: F) -> Result<DistributionTable>
where
    F: Fn(&SpinConfiguration) -> SpinConfiguration,
{
    guard(n_out)?;
    let mut acc = vec![crate::logspace::LogAcc::default(); 1 << n_out];
    for (idx, &lm) in p.log_mass.iter().enumerate() {
        let img = f(&SpinConfiguration::from_index(p.n, idx as u64));
        check_len(n_out, img.len())?;
        acc[img.index() as usize].push(lm);
    }
    DistributionTable::from_log_masses(n_out, acc.iter().map(|a| a.value()).collect())
}
