//! Closed-form Black-Scholes call pricing, Greeks, implied-volatility
//! inversion and the pricing-PDE residual.
//!
//! Time is measured as time to maturity `tau`, so the residual of a price
//! function `C(S, tau)` is
//!
//! ```text
//! -C_tau - r C + r S C_S + 0.5 sigma^2 S^2 C_SS
//! ```
//!
//! which vanishes on the closed-form price.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricingError {
    #[error("invalid market point: {0}")]
    Domain(String),
    #[error("greeks are undefined at tau = {tau}, sigma = {sigma}; use the limiting price")]
    Degenerate { tau: f64, sigma: f64 },
    #[error("price {price} outside the invertible range ({lower}, {upper})")]
    InversionDomain { price: f64, lower: f64, upper: f64 },
    #[error("implied volatility did not converge in {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, PricingError>;

/// Lower end of the implied-volatility search bracket.
pub const IV_LOWER: f64 = 1e-4;
/// Upper end of the implied-volatility search bracket.
pub const IV_UPPER: f64 = 5.0;
pub const IV_MAX_ITERATIONS: usize = 200;

/// One option observation: spot, strike, rate, time to maturity, volatility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarketPoint {
    pub spot: f64,
    pub strike: f64,
    pub rate: f64,
    pub tau: f64,
    pub vol: f64,
}

impl MarketPoint {
    pub fn new(spot: f64, strike: f64, rate: f64, tau: f64, vol: f64) -> Result<Self> {
        let p = Self {
            spot,
            strike,
            rate,
            tau,
            vol,
        };
        p.validate()?;
        Ok(p)
    }

    /// Build from moneyness `m = K / S`.
    pub fn from_moneyness(spot: f64, moneyness: f64, rate: f64, tau: f64, vol: f64) -> Result<Self> {
        Self::new(spot, moneyness * spot, rate, tau, vol)
    }

    pub fn moneyness(&self) -> f64 {
        self.strike / self.spot
    }

    pub fn with_vol(self, vol: f64) -> Self {
        Self { vol, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.spot, self.strike, self.rate, self.tau, self.vol]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PricingError::Domain(format!("non-finite input {self:?}")));
        }
        if self.spot <= 0.0 || self.strike <= 0.0 {
            return Err(PricingError::Domain(format!(
                "spot and strike must be positive (S = {}, K = {})",
                self.spot, self.strike
            )));
        }
        if self.tau < 0.0 || self.vol < 0.0 {
            return Err(PricingError::Domain(format!(
                "tau and sigma must be nonnegative (tau = {}, sigma = {})",
                self.tau, self.vol
            )));
        }
        Ok(())
    }

    fn discounted_strike(&self) -> f64 {
        self.strike * (-self.rate * self.tau).exp()
    }

    fn d1_d2(&self) -> (f64, f64) {
        let sd = self.vol * self.tau.sqrt();
        let d1 = ((self.spot / self.strike).ln() + (self.rate + 0.5 * self.vol * self.vol) * self.tau) / sd;
        (d1, d1 - sd)
    }

    /// No-arbitrage lower bound `max(S - K e^{-r tau}, 0)`.
    pub fn lower_bound(&self) -> f64 {
        (self.spot - self.discounted_strike()).max(0.0)
    }
}

/// Price and the sensitivities that enter the pricing PDE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreeksBundle {
    pub price: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Derivative with respect to time to maturity.
    pub theta_tau: f64,
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// European call price. At `tau = 0` or `sigma = 0` the forward-intrinsic
/// limit `max(S - K e^{-r tau}, 0)` is returned.
pub fn bs_price(point: &MarketPoint) -> Result<f64> {
    point.validate()?;
    if point.tau == 0.0 || point.vol == 0.0 {
        return Ok(point.lower_bound());
    }
    let (d1, d2) = point.d1_d2();
    let price = point.spot * norm_cdf(d1) - point.discounted_strike() * norm_cdf(d2);
    Ok(price.clamp(point.lower_bound(), point.spot))
}

pub fn bs_greeks(point: &MarketPoint) -> Result<GreeksBundle> {
    point.validate()?;
    if point.tau == 0.0 || point.vol == 0.0 {
        return Err(PricingError::Degenerate {
            tau: point.tau,
            sigma: point.vol,
        });
    }
    let (d1, d2) = point.d1_d2();
    let sqrt_tau = point.tau.sqrt();
    let pdf = norm_pdf(d1);
    let disc_k = point.discounted_strike();
    Ok(GreeksBundle {
        price: point.spot * norm_cdf(d1) - disc_k * norm_cdf(d2),
        delta: norm_cdf(d1),
        gamma: pdf / (point.spot * point.vol * sqrt_tau),
        theta_tau: point.spot * pdf * point.vol / (2.0 * sqrt_tau) + point.rate * disc_k * norm_cdf(d2),
    })
}

pub fn vega(point: &MarketPoint) -> f64 {
    if point.tau == 0.0 || point.vol == 0.0 {
        return 0.0;
    }
    let (d1, _) = point.d1_d2();
    point.spot * norm_pdf(d1) * point.tau.sqrt()
}

/// Residual of the pricing PDE for a candidate price and its derivatives.
/// Zero when `price` and its derivatives come from the closed form at the
/// point's own volatility.
pub fn pde_residual(price: f64, theta_tau: f64, delta: f64, gamma: f64, point: &MarketPoint) -> f64 {
    let (s, r, sigma) = (point.spot, point.rate, point.vol);
    -theta_tau - r * price + r * s * delta + 0.5 * sigma * sigma * s * s * gamma
}

/// Invert the call price for volatility. `point.vol` is ignored.
///
/// Newton steps on vega, falling back to bisection whenever a step leaves
/// the current bracket inside `[IV_LOWER, IV_UPPER]`.
pub fn implied_vol(price: f64, point: &MarketPoint, tol: f64) -> Result<f64> {
    let base = point.with_vol(0.0);
    base.validate()?;
    if base.tau <= 0.0 {
        return Err(PricingError::Domain("implied volatility needs tau > 0".into()));
    }
    let lower = base.lower_bound();
    let upper = base.spot;
    if !(price > lower && price < upper) {
        return Err(PricingError::InversionDomain { price, lower, upper });
    }
    let f = |sigma: f64| bs_price(&base.with_vol(sigma)).map(|p| p - price);
    let (mut lo, mut hi) = (IV_LOWER, IV_UPPER);
    if f(lo)? > 0.0 || f(hi)? < 0.0 {
        return Err(PricingError::InversionDomain {
            price,
            lower: bs_price(&base.with_vol(lo))?,
            upper: bs_price(&base.with_vol(hi))?,
        });
    }

    // Start from the at-the-money approximation, kept inside the bracket.
    let mut sigma = ((2.0 * std::f64::consts::PI / base.tau).sqrt() * price / base.spot).clamp(0.05, 2.0);
    let mut residual = f64::INFINITY;
    for _ in 0..IV_MAX_ITERATIONS {
        residual = f(sigma)?;
        if residual.abs() < tol {
            return Ok(sigma);
        }
        if residual > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        if hi - lo < f64::EPSILON * hi {
            return Ok(sigma);
        }
        let v = vega(&base.with_vol(sigma));
        let newton = sigma - residual / v;
        sigma = if v > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(PricingError::Convergence {
        iterations: IV_MAX_ITERATIONS,
        residual,
    })
}
