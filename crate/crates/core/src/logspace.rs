//! Log-domain accumulation and log-binomial coefficients.

use statrs::function::factorial::ln_binomial;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy, Debug)]
pub struct LogAcc {
    max: f64,
    sum: f64,
}

impl Default for LogAcc {
    fn default() -> Self {
        LogAcc {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl LogAcc {
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

pub fn ln_binom(r: u64, k: u64) -> f64 {
    if k > r {
        return f64::NEG_INFINITY;
    }
    ln_binomial(r, k)
}

/// ln cosh without overflow.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn ln_2cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct() {
        let xs = [0.1, -2.0, 3.5];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-14);
        let mut acc = LogAcc::default();
        for x in xs {
            acc.push(x);
        }
        assert!((acc.value() - direct).abs() < 1e-14);
        assert!((log_add(0.1, -2.0) - log_sum_exp(&[0.1, -2.0])).abs() < 1e-15);
    }

    #[test]
    fn lse_survives_huge_arguments() {
        let v = log_sum_exp(&[1e6, 1e6]);
        assert!((v - (1e6 + std::f64::consts::LN_2)).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn binomials() {
        assert!((ln_binom(5, 2) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(ln_binom(3, 0), 0.0);
        assert_eq!(ln_binom(3, 4), f64::NEG_INFINITY);
    }

    #[test]
    fn cosh_forms() {
        for x in [-3.0, -0.2, 0.0, 0.7, 40.0] {
            assert!((ln_2cosh(x) - (2.0 * f64::cosh(x)).ln()).abs() < 1e-12);
            assert!((ln_cosh(x) - f64::cosh(x).ln()).abs() < 1e-12);
        }
        assert!((ln_2cosh(1000.0) - 1000.0).abs() < 1e-12);
    }
}
