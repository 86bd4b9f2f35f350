//! von Mises–Fisher density on the unit hypersphere.
//!
//! The normalizer needs `I_v(κ)` with `v = m/2 − 1`, which leaves the range
//! of `f64` quickly in linear form (m = 4096 at κ = 10 gives
//! `I_v ≈ 10^-9000`). Everything here is therefore computed as a logarithm:
//!
//! * power series for `κ < max(v, 30)`,
//! * for larger arguments, Hankel's large-argument expansion when the order
//!   is small and Debye's uniform expansion otherwise.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::embeddings::{dot, log_sum_exp, PrototypeBank};
use crate::error::{Error, Result};

/// Orders at or above this use the uniform expansion in the asymptotic
/// regime; below it Hankel's series converges well for `x ≥ 30`.
const DEBYE_MIN_ORDER: f64 = 10.0;
const SERIES_MIN_CROSSOVER: f64 = 30.0;
const DEBYE_TERMS: usize = 16;
const RESCALE: f64 = 1e250;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfParams {
    m: usize,
    kappa: f64,
}

impl VmfParams {
    pub fn new(m: usize, kappa: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!("vMF dimension must be >= 2, got {m}")));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::invalid(format!(
                "vMF concentration must be finite and >= 0, got {kappa}"
            )));
        }
        Ok(Self { m, kappa })
    }

    /// Concentration matching a softmax temperature: `κ = 1/t`.
    pub fn from_temperature(m: usize, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {t}")));
        }
        Self::new(m, 1.0 / t)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn order(&self) -> f64 {
        self.m as f64 / 2.0 - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesselRegime {
    Series,
    Hankel,
    Debye,
}

impl BesselRegime {
    fn name(self) -> &'static str {
        match self {
            BesselRegime::Series => "power-series",
            BesselRegime::Hankel => "large-argument",
            BesselRegime::Debye => "uniform-asymptotic",
        }
    }
}

/// Which evaluation branch `log_bessel_i` takes for `(order, x)`.
pub fn bessel_regime(order: f64, x: f64) -> BesselRegime {
    if x < order.max(SERIES_MIN_CROSSOVER) {
        BesselRegime::Series
    } else if order < DEBYE_MIN_ORDER {
        BesselRegime::Hankel
    } else {
        BesselRegime::Debye
    }
}

/// `ln I_v(x)` for `v ≥ 0`, `x ≥ 0`.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(if order == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(log_bessel_i_over_power(order, x)? + order * x.ln())
}

/// `ln(I_v(x) / x^v)`, finite down to `x = 0` where it equals
/// `−v ln 2 − ln Γ(v + 1)`.
pub fn log_bessel_i_over_power(order: f64, x: f64) -> Result<f64> {
    if !(order >= 0.0) || !(x >= 0.0) {
        return Err(Error::invalid(format!(
            "Bessel I requires order >= 0 and x >= 0, got order {order}, x {x}"
        )));
    }
    let regime = bessel_regime(order, x);
    let value = match regime {
        BesselRegime::Series => series_over_power(order, x),
        BesselRegime::Hankel => hankel_log(order, x).map(|l| l - order * x.ln()),
        BesselRegime::Debye => debye_log(order, x).map(|l| l - order * x.ln()),
    };
    match value {
        Some(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Bessel {
            regime: regime.name(),
            order,
            x,
        }),
    }
}

/// `ln(I_v(x)/x^v) = −v ln 2 − ln Γ(v+1) + ln Σₖ rₖ` with
/// `rₖ₊₁ = rₖ · (x²/4) / ((k+1)(v+k+1))`, `r₀ = 1`.
pub(crate) fn series_over_power(order: f64, x: f64) -> Option<f64> {
    let q = x * x / 4.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut log_scale = 0.0f64;
    let mut k = 0.0f64;
    // terms grow until k(v+k) ≈ q, then decay
    let peak = 0.5 * (-order + (order * order + 4.0 * q).sqrt());
    for _ in 0..1_000_000 {
        term *= q / ((k + 1.0) * (order + k + 1.0));
        k += 1.0;
        sum += term;
        if sum > RESCALE {
            sum /= RESCALE;
            term /= RESCALE;
            log_scale += RESCALE.ln();
        }
        if k > peak && term <= sum * 1e-17 {
            return Some(-order * LN_2 - ln_gamma(order + 1.0) + sum.ln() + log_scale);
        }
    }
    None
}

/// Hankel: `I_v(x) ~ eˣ/√(2πx) · Σₖ (−1)ᵏ aₖ(v)/xᵏ`,
/// `aₖ(v) = Πⱼ₌₁..ₖ (4v² − (2j−1)²) / (k! 8ᵏ)`.
pub(crate) fn hankel_log(order: f64, x: f64) -> Option<f64> {
    let mu = 4.0 * order * order;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut prev_abs = f64::INFINITY;
    for j in 1..200 {
        let odd = (2 * j - 1) as f64;
        term *= -(mu - odd * odd) / (j as f64 * 8.0 * x);
        let abs = term.abs();
        // asymptotic series: stop at the smallest term
        if abs > prev_abs && j as f64 > order {
            break;
        }
        sum += term;
        if abs <= sum.abs() * 1e-17 {
            break;
        }
        prev_abs = abs;
    }
    if !(sum > 0.0) {
        return None;
    }
    Some(x - 0.5 * (2.0 * PI * x).ln() + sum.ln())
}

/// Debye: with `z = x/v`, `w = √(1+z²)`, `p = 1/w`,
/// `η = w + ln(z/(1+w))`:
/// `I_v(vz) ~ e^{vη} / (√(2πv) · √w) · Σₖ uₖ(p)/vᵏ`.
pub(crate) fn debye_log(order: f64, x: f64) -> Option<f64> {
    let z = x / order;
    let w = (1.0 + z * z).sqrt();
    let p = 1.0 / w;
    let eta = w + (z / (1.0 + w)).ln();
    let mut sum = 0.0;
    let mut vpow = 1.0;
    for poly in debye_polynomials() {
        let term = eval_poly(poly, p) / vpow;
        sum += term;
        if term.abs() <= sum.abs() * 1e-17 {
            break;
        }
        vpow *= order;
    }
    if !(sum > 0.0) {
        return None;
    }
    Some(order * eta - 0.5 * (2.0 * PI * order).ln() - 0.5 * w.ln() + sum.ln())
}

fn eval_poly(coeffs: &[f64], p: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * p + c)
}

/// Coefficients (by ascending power of p) of the Debye polynomials, from
/// `u₀ = 1` and
/// `uₖ₊₁(p) = ½p²(1−p²)uₖ'(p) + ⅛∫₀ᵖ(1−5t²)uₖ(t)dt`.
fn debye_polynomials() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys = vec![vec![1.0]];
        for _ in 1..DEBYE_TERMS {
            let u = polys.last().unwrap();
            let mut next = vec![0.0; u.len() + 3];
            for (n, &c) in u.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let n_f = n as f64;
                // ½ p² (1 − p²) · n c p^{n−1}
                if n >= 1 {
                    next[n + 1] += 0.5 * n_f * c;
                    next[n + 3] -= 0.5 * n_f * c;
                }
                // ⅛ ∫ (1 − 5t²) c tⁿ
                next[n + 1] += c / (8.0 * (n_f + 1.0));
                next[n + 3] -= 5.0 * c / (8.0 * (n_f + 3.0));
            }
            polys.push(next);
        }
        polys
    })
}

/// `ln Z_m(κ)` with `Z_m(κ) = κ^{m/2−1} / ((2π)^{m/2} I_{m/2−1}(κ))`.
/// At κ = 0 this is the reciprocal surface area of the sphere.
pub fn vmf_log_normalizer(params: &VmfParams) -> Result<f64> {
    let half_m = params.m as f64 / 2.0;
    Ok(-half_m * (2.0 * PI).ln() - log_bessel_i_over_power(params.order(), params.kappa)?)
}

/// `ln p_m(z; μ, κ) = ln Z_m(κ) + κ μᵀz`.
pub fn vmf_log_density(z: &[f64], mu: &[f64], params: &VmfParams) -> Result<f64> {
    for v in [z, mu] {
        if v.len() != params.m {
            return Err(Error::DimensionMismatch {
                expected: params.m,
                actual: v.len(),
            });
        }
    }
    Ok(vmf_log_normalizer(params)? + params.kappa * dot(mu, z))
}

/// Posterior over classes of an equal-weight vMF mixture whose components
/// share `κ` and sit at the bank's prototypes.
pub fn vmf_mixture_posterior(z: &[f64], bank: &PrototypeBank, params: &VmfParams) -> Result<Vec<f64>> {
    if bank.num_classes() == 0 {
        return Err(Error::invalid("prototype bank has no classes"));
    }
    let log_dens = bank
        .prototypes()
        .iter_rows()
        .map(|mu| vmf_log_density(z, mu, params))
        .collect::<Result<Vec<_>>>()?;
    let lse = log_sum_exp(&log_dens);
    Ok(log_dens.into_iter().map(|l| (l - lse).exp()).collect())
}

/// `ln` of the surface area of the unit sphere in `R^m`:
/// `2π^{m/2} / Γ(m/2)`.
pub fn log_sphere_area(m: usize) -> f64 {
    let half_m = m as f64 / 2.0;
    LN_2 + half_m * PI.ln() - ln_gamma(half_m)
}
