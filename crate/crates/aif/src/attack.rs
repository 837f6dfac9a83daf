//! The l_p threat model: norm orders, conjugate exponents, steepest-ascent directions and
//! projections onto perturbation balls.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{mean_norm, Dataset};
use crate::error::{AifError, Result};

/// Norm order of the perturbation ball. `P` holds a general finite exponent in (1, ∞).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormOrder {
    One,
    Two,
    Inf,
    P(f64),
}

impl NormOrder {
    pub fn general(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(NormOrder::One)
        } else if p == 2.0 {
            Ok(NormOrder::Two)
        } else if p == f64::INFINITY {
            Ok(NormOrder::Inf)
        } else if p > 1.0 && p.is_finite() {
            Ok(NormOrder::P(p))
        } else {
            Err(AifError::Config(format!("norm order must be >= 1, got {p}")))
        }
    }

    pub fn exponent(self) -> f64 {
        match self {
            NormOrder::One => 1.0,
            NormOrder::Two => 2.0,
            NormOrder::Inf => f64::INFINITY,
            NormOrder::P(p) => p,
        }
    }

    /// The Hölder conjugate q with 1/p + 1/q = 1.
    pub fn conjugate(self) -> NormOrder {
        match self {
            NormOrder::One => NormOrder::Inf,
            NormOrder::Two => NormOrder::Two,
            NormOrder::Inf => NormOrder::One,
            NormOrder::P(p) => {
                let q = p / (p - 1.0);
                if q == 2.0 {
                    NormOrder::Two
                } else {
                    NormOrder::P(q)
                }
            }
        }
    }

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormOrder::One => v.iter().map(|x| x.abs()).sum(),
            NormOrder::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormOrder::Inf => v.iter().fold(0.0, |acc, x| acc.max(x.abs())),
            NormOrder::P(p) => {
                let scale = v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()));
                if scale == 0.0 {
                    return 0.0;
                }
                let s: f64 = v.iter().map(|x| (x.abs() / scale).powf(p)).sum();
                scale * s.powf(1.0 / p)
            }
        }
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormOrder::One => write!(f, "1"),
            NormOrder::Two => write!(f, "2"),
            NormOrder::Inf => write!(f, "inf"),
            NormOrder::P(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for NormOrder {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" => Ok(NormOrder::Inf),
            other => {
                let p: f64 = other
                    .parse()
                    .map_err(|_| AifError::Config(format!("invalid norm order '{s}'")))?;
                NormOrder::general(p)
            }
        }
    }
}

impl Serialize for NormOrder {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NormOrder {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let parsed = match Raw::deserialize(deserializer)? {
            Raw::Num(p) => NormOrder::general(p),
            Raw::Str(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

fn default_p() -> NormOrder {
    NormOrder::Two
}

fn default_u() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_p")]
    pub p: NormOrder,
    #[serde(default)]
    pub epsilon: f64,
    /// Wasserstein order, used only by the distributional variant.
    #[serde(default = "default_u")]
    pub u: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            p: NormOrder::Two,
            epsilon: 0.0,
            u: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn new(p: NormOrder, epsilon: f64) -> Self {
        AttackConfig { p, epsilon, u: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AifError::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.u >= 1.0 && self.u.is_finite()) {
            return Err(AifError::Config(format!("u must be >= 1, got {}", self.u)));
        }
        Ok(())
    }
}

/// Absolute per-sample budget r = ε·Ê‖x‖_p over the training inputs.
pub fn radius(config: &AttackConfig, d: &Dataset) -> Result<f64> {
    if config.epsilon == 0.0 {
        return Ok(0.0);
    }
    Ok(config.epsilon * mean_norm(d, config.p)?)
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unit-l_p direction φ maximizing gᵀφ, so that gᵀφ = ‖g‖_q.
pub fn steepest_direction(g: &DVector<f64>, p: NormOrder) -> Result<DVector<f64>> {
    if g.iter().all(|&x| x == 0.0) {
        return Err(AifError::DegenerateGradient { sample: None });
    }
    let phi = match p {
        NormOrder::Two => g / g.norm(),
        NormOrder::Inf => g.map(sgn),
        NormOrder::One => {
            let mut best = 0;
            for k in 1..g.len() {
                if g[k].abs() > g[best].abs() {
                    best = k;
                }
            }
            let mut phi = DVector::zeros(g.len());
            phi[best] = sgn(g[best]);
            phi
        }
        NormOrder::P(p) => {
            let q = p / (p - 1.0);
            // b_k^{q-1} / (Σ b^q)^{1/p} is invariant to rescaling g, so normalize first.
            let scale = g.amax();
            let b = g.map(|x| x.abs() / scale);
            let denom = b.iter().map(|x| x.powf(q)).sum::<f64>().powf(1.0 / p);
            DVector::from_fn(g.len(), |k, _| b[k].powf(q - 1.0) / denom * sgn(g[k]))
        }
    };
    Ok(phi)
}

/// Projects δ in place onto {‖δ‖_p ≤ r}.
pub fn project_ball(delta: &mut DVector<f64>, r: f64, p: NormOrder) -> Result<()> {
    if r <= 0.0 {
        delta.fill(0.0);
        return Ok(());
    }
    match p {
        NormOrder::Two => {
            let n = delta.norm();
            if n > r {
                *delta *= r / n;
            }
        }
        NormOrder::Inf => {
            delta.apply(|x| *x = x.clamp(-r, r));
        }
        NormOrder::One => {
            let total: f64 = delta.iter().map(|x| x.abs()).sum();
            if total > r {
                let theta = simplex_threshold(delta.as_slice(), r);
                delta.apply(|x| *x = sgn(*x) * (x.abs() - theta).max(0.0));
            }
        }
        NormOrder::P(_) => {
            return Err(AifError::Config(
                "ball projection is available for p in {1, 2, inf} only".into(),
            ))
        }
    }
    Ok(())
}

/// Soft threshold θ such that Σ max(|v_k| − θ, 0) = r, assuming ‖v‖₁ > r.
fn simplex_threshold(v: &[f64], r: f64) -> f64 {
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumulative += m;
        let candidate = (cumulative - r) / (j as f64 + 1.0);
        if m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn conjugates() {
        assert_eq!(NormOrder::One.conjugate(), NormOrder::Inf);
        assert_eq!(NormOrder::Inf.conjugate(), NormOrder::One);
        assert_eq!(NormOrder::Two.conjugate(), NormOrder::Two);
        match NormOrder::P(1.5).conjugate() {
            NormOrder::P(q) => assert!((q - 3.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_dimensional_direction_is_sign() {
        let phi = steepest_direction(&v(&[-0.75]), NormOrder::Two).unwrap();
        assert_eq!(phi[0], -1.0);
    }

    #[test]
    fn l2_and_linf_examples() {
        let phi = steepest_direction(&v(&[3.0, -4.0]), NormOrder::Two).unwrap();
        assert!((phi[0] - 0.6).abs() < 1e-15 && (phi[1] + 0.8).abs() < 1e-15);
        let phi = steepest_direction(&v(&[3.0, -4.0]), NormOrder::Inf).unwrap();
        assert_eq!(phi.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn l1_picks_lowest_index_among_ties() {
        let phi = steepest_direction(&v(&[2.0, -2.0, 1.0]), NormOrder::One).unwrap();
        assert_eq!(phi.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_coordinates_contribute_zero() {
        let phi = steepest_direction(&v(&[0.0, 5.0]), NormOrder::Inf).unwrap();
        assert_eq!(phi.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        assert!(matches!(
            steepest_direction(&v(&[0.0, 0.0]), NormOrder::Two),
            Err(AifError::DegenerateGradient { .. })
        ));
    }

    #[test]
    fn parse_norm_orders() {
        assert_eq!("inf".parse::<NormOrder>().unwrap(), NormOrder::Inf);
        assert_eq!("1".parse::<NormOrder>().unwrap(), NormOrder::One);
        assert_eq!("2".parse::<NormOrder>().unwrap(), NormOrder::Two);
        assert_eq!("1.5".parse::<NormOrder>().unwrap(), NormOrder::P(1.5));
        assert!("0.5".parse::<NormOrder>().is_err());
        let cfg: AttackConfig = serde_json::from_str(r#"{"p": "inf", "epsilon": 0.1}"#).unwrap();
        assert_eq!(cfg.p, NormOrder::Inf);
        let cfg: AttackConfig = serde_json::from_str(r#"{"p": 1, "epsilon": 0.1}"#).unwrap();
        assert_eq!(cfg.p, NormOrder::One);
    }

    #[test]
    fn l1_projection_lands_on_sphere() {
        let mut d = v(&[3.0, -1.0, 0.5]);
        project_ball(&mut d, 2.0, NormOrder::One).unwrap();
        assert!((NormOrder::One.norm(d.as_slice()) - 2.0).abs() < 1e-12);
        assert_eq!(d.as_slice(), &[2.0, 0.0, 0.0]);
        let mut d = v(&[1.0, -1.0]);
        project_ball(&mut d, 1.0, NormOrder::One).unwrap();
        assert_eq!(d.as_slice(), &[0.5, -0.5]);
    }

    fn orders() -> impl Strategy<Value = NormOrder> {
        prop_oneof![
            Just(NormOrder::One),
            Just(NormOrder::Two),
            Just(NormOrder::Inf),
            Just(NormOrder::P(1.5)),
            Just(NormOrder::P(3.0)),
        ]
    }

    proptest! {
        #[test]
        fn holder_tightness(g in prop::collection::vec(-10.0f64..10.0, 1..8), p in orders()) {
            let g = DVector::from_vec(g);
            prop_assume!(g.amax() > 1e-6);
            let phi = steepest_direction(&g, p).unwrap();
            let q = p.conjugate();
            prop_assert!((g.dot(&phi) - q.norm(g.as_slice())).abs() < 1e-10 * (1.0 + g.amax()));
            prop_assert!(p.norm(phi.as_slice()) <= 1.0 + 1e-12);
        }

        #[test]
        fn scale_equivariance(g in prop::collection::vec(-10.0f64..10.0, 1..8), c in 0.01f64..100.0, p in orders()) {
            let g = DVector::from_vec(g);
            prop_assume!(g.amax() > 1e-6);
            let a = steepest_direction(&g, p).unwrap();
            let b = steepest_direction(&(&g * c), p).unwrap();
            prop_assert!((a - b).amax() < 1e-12);
        }

        #[test]
        fn l2_direction_has_unit_norm(g in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let g = DVector::from_vec(g);
            prop_assume!(g.amax() > 1e-6);
            let phi = steepest_direction(&g, NormOrder::Two).unwrap();
            prop_assert!((phi.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn projection_is_feasible_and_idempotent(
            d in prop::collection::vec(-5.0f64..5.0, 1..6),
            r in 0.0f64..3.0,
            p in prop_oneof![Just(NormOrder::One), Just(NormOrder::Two), Just(NormOrder::Inf)],
        ) {
            let mut delta = DVector::from_vec(d);
            project_ball(&mut delta, r, p).unwrap();
            prop_assert!(p.norm(delta.as_slice()) <= r * (1.0 + 1e-12) + 1e-15);
            let before = delta.clone();
            project_ball(&mut delta, r, p).unwrap();
            prop_assert!((before - delta).amax() < 1e-12);
        }
    }
}
