//! Width from a parameter budget.
//!
//! A constant-width net with `L` hidden layers and `n_x` re-injections has
//!
//! ```text
//! input projections  (1 + n_x)·d·h
//! hidden-to-hidden   (L - 1)·h²
//! output layer       h·d_out
//! biases             L·h + d_out
//! ```
//!
//! parameters. Sizing keeps the two dominant terms at the budget
//! `P = ρ·n·d`, i.e. `(L-1)h² + D·h = P` with `D = (1 + n_x)·d`, and takes the
//! positive root rounded to the nearest integer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSpec {
    /// Parameter fraction `ρ` of the database size `n·d`.
    pub rho: f64,
    pub n: usize,
    pub d: usize,
    pub depth: usize,
    pub reinject: usize,
}

impl BudgetSpec {
    pub fn budget(&self) -> f64 {
        self.rho * self.n as f64 * self.d as f64
    }

    /// `D = (1 + n_x)·d`.
    pub fn input_span(&self) -> f64 {
        ((1 + self.reinject) * self.d) as f64
    }

    /// The two dominant terms `(L-1)h² + D·h` at width `h`.
    pub fn dominant_count(&self, h: usize) -> f64 {
        ((self.depth - 1) * h * h) as f64 + self.input_span() * h as f64
    }
}

/// Real-valued root of the sizing quadratic, before rounding.
pub fn width_exact(b: &BudgetSpec) -> Result<f64> {
    if !(b.rho > 0.0 && b.rho <= 1.0) {
        return Err(Error::invalid(format!("parameter fraction {} outside (0, 1]", b.rho)));
    }
    if b.depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    let p = b.budget();
    if !(p > 0.0) {
        return Err(Error::invalid("parameter budget must be positive"));
    }
    let dd = b.input_span();
    if b.depth == 1 {
        return Ok(p / dd);
    }
    let l1 = (b.depth - 1) as f64;
    Ok(((dd * dd + 4.0 * l1 * p).sqrt() - dd) / (2.0 * l1))
}

pub fn solve_width(b: &BudgetSpec) -> Result<usize> {
    Ok((width_exact(b)?.round() as usize).max(1))
}

/// Named parameter fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeTag {
    XS,
    S,
    M,
    L,
    XL,
    XXL,
}

impl SizeTag {
    pub const ALL: [SizeTag; 6] = [
        SizeTag::XS,
        SizeTag::S,
        SizeTag::M,
        SizeTag::L,
        SizeTag::XL,
        SizeTag::XXL,
    ];

    pub fn fraction(self) -> f64 {
        match self {
            SizeTag::XS => 0.01,
            SizeTag::S => 0.05,
            SizeTag::M => 0.10,
            SizeTag::L => 0.20,
            SizeTag::XL => 0.40,
            SizeTag::XXL => 0.50,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeTag::XS => "XS",
            SizeTag::S => "S",
            SizeTag::M => "M",
            SizeTag::L => "L",
            SizeTag::XL => "XL",
            SizeTag::XXL => "XXL",
        }
    }
}

impl std::str::FromStr for SizeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SizeTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown size tag `{s}`")))
    }
}

/// How many hidden layers re-read the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReinjectPolicy {
    /// Every hidden layer after the first: `n_x = L - 1`.
    EveryLayer,
    /// Roughly one layer in four: `n_x = ⌊L/4⌋`.
    EveryFourth,
}

impl ReinjectPolicy {
    pub fn count(self, depth: usize) -> usize {
        match self {
            ReinjectPolicy::EveryLayer => depth.saturating_sub(1),
            ReinjectPolicy::EveryFourth => (depth / 4).min(depth.saturating_sub(1)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReinjectPolicy::EveryLayer => "every-layer",
            ReinjectPolicy::EveryFourth => "every-4th",
        }
    }
}

impl std::str::FromStr for ReinjectPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "every-layer" | "all" => Ok(ReinjectPolicy::EveryLayer),
            "every-4th" | "quarter" => Ok(ReinjectPolicy::EveryFourth),
            other => Err(Error::invalid(format!("unknown re-injection policy `{other}`"))),
        }
    }
}
