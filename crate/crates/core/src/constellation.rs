//! Modulation alphabets and their shape statistics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::C64;

/// A modulation alphabet: `M` unit-average-power points with fixed bit labels.
///
/// Label bit `i` of symbol `m` is bit `c - 1 - i` of `labels[m]`, i.e. bit 0
/// is the most significant one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    points: Vec<C64>,
    labels: Vec<u32>,
}

impl Constellation {
    /// Validates and power-normalizes an alphabet.
    pub fn new(points: Vec<C64>, labels: Vec<u32>) -> Result<Self> {
        let m = points.len();
        if m < 2 || !m.is_power_of_two() {
            return invalid(format!("alphabet size must be a power of two >= 2, got {m}"));
        }
        if labels.len() != m {
            return invalid("one label per point required");
        }
        let mut seen = vec![false; m];
        for &l in &labels {
            let l = l as usize;
            if l >= m || seen[l] {
                return invalid("labels must be a permutation of 0..M");
            }
            seen[l] = true;
        }
        if points.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid("points must be finite");
        }
        let power = points.iter().map(|z| z.norm_sqr()).sum::<f64>() / m as f64;
        if !(power > 0.0) {
            return invalid("alphabet has zero power");
        }
        let s = power.sqrt();
        let points: Vec<C64> = points.iter().map(|z| z / s).collect();
        for i in 0..m {
            for j in (i + 1)..m {
                if (points[i] - points[j]).norm() < 1e-9 {
                    return invalid(format!("points {i} and {j} coincide"));
                }
            }
        }
        Ok(Constellation { points, labels })
    }

    /// Alphabet with labels equal to the symbol index.
    pub fn with_natural_labels(points: Vec<C64>) -> Result<Self> {
        let labels = (0..points.len() as u32).collect();
        Constellation::new(points, labels)
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.points.len().trailing_zeros() as usize
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn point(&self, m: usize) -> C64 {
        self.points[m]
    }

    pub fn label(&self, m: usize) -> u32 {
        self.labels[m]
    }

    /// Bit `i` (0 = most significant) of symbol `m`.
    pub fn bit(&self, m: usize, i: usize) -> u8 {
        let c = self.bits_per_symbol();
        ((self.labels[m] >> (c - 1 - i)) & 1) as u8
    }

    pub fn bits(&self, m: usize) -> Vec<u8> {
        (0..self.bits_per_symbol()).map(|i| self.bit(m, i)).collect()
    }

    /// Symbol index carrying the given label.
    pub fn symbol_for_label(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Rows `(index, bit string, re, im)` for tabular export.
    pub fn table(&self) -> Vec<(usize, String, f64, f64)> {
        (0..self.order())
            .map(|m| {
                let bits: String = self.bits(m).iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
                (m, bits, self.points[m].re, self.points[m].im)
            })
            .collect()
    }

    pub fn mean_power(&self) -> f64 {
        self.points.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.order() as f64
    }
}

fn gray(n: u32) -> u32 {
    n ^ (n >> 1)
}

/// Square QAM with per-axis Gray labels.
pub fn make_qam(order: usize) -> Result<Constellation> {
    if !matches!(order, 4 | 16 | 64) {
        return invalid(format!("square QAM supports M in {{4, 16, 64}}, got {order}"));
    }
    let side = (order as f64).sqrt().round() as u32;
    let half_bits = side.trailing_zeros();
    let mut points = Vec::with_capacity(order);
    let mut labels = Vec::with_capacity(order);
    for i in 0..side {
        for q in 0..side {
            let level = |j: u32| 2.0 * j as f64 - (side - 1) as f64;
            points.push(C64::new(level(i), level(q)));
            labels.push((gray(i) << half_bits) | gray(q));
        }
    }
    Constellation::new(points, labels)
}

/// Unit-circle PSK with Gray labels around the circle.
pub fn make_psk(order: usize) -> Result<Constellation> {
    if order < 2 {
        return invalid("PSK needs M >= 2");
    }
    let points = (0..order)
        .map(|k| C64::from_polar(1.0, 2.0 * PI * k as f64 / order as f64))
        .collect();
    let labels = (0..order as u32).map(gray).collect();
    Constellation::new(points, labels)
}

/// Two concentric 8-point rings for 16-ary APSK.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApskSpec {
    pub order: usize,
    pub inner_radius: f64,
}

impl ApskSpec {
    pub fn new(inner_radius: f64) -> Self {
        ApskSpec {
            order: 16,
            inner_radius,
        }
    }

    pub fn outer_radius(&self) -> f64 {
        (2.0 - self.inner_radius * self.inner_radius).sqrt()
    }

    /// The ring pair whose kurtosis equals `kappa` (needs `1 <= kappa <= 2`).
    pub fn from_kurtosis(kappa: f64) -> Result<Self> {
        if !(1.0..=2.0).contains(&kappa) {
            return invalid(format!("two-ring kurtosis must lie in [1, 2], got {kappa}"));
        }
        Ok(ApskSpec::new((1.0 - (kappa - 1.0).sqrt()).sqrt()))
    }
}

pub fn make_apsk(spec: ApskSpec) -> Result<Constellation> {
    if spec.order != 16 {
        return invalid(format!("two-ring APSK is defined for M = 16, got {}", spec.order));
    }
    if !(0.0..=1.0).contains(&spec.inner_radius) {
        return invalid(format!("inner radius must lie in [0, 1], got {}", spec.inner_radius));
    }
    if spec.inner_radius == 0.0 {
        return invalid("inner ring collapses to a single point at radius 0");
    }
    let ring = spec.order / 2;
    let step = 2.0 * PI / ring as f64;
    let offset = 2.0 * PI / spec.order as f64;
    let mut points = Vec::with_capacity(spec.order);
    for k in 0..ring {
        points.push(C64::from_polar(spec.inner_radius, k as f64 * step));
    }
    for k in 0..ring {
        points.push(C64::from_polar(spec.outer_radius(), k as f64 * step + offset));
    }
    Constellation::with_natural_labels(points)
}

/// Fourth standardized moment `E|x|^4 / (E|x|^2)^2`.
pub fn kurtosis(c: &Constellation) -> f64 {
    let m = c.order() as f64;
    let p2 = c.points().iter().map(|z| z.norm_sqr()).sum::<f64>() / m;
    let p4 = c.points().iter().map(|z| z.norm_sqr().powi(2)).sum::<f64>() / m;
    p4 / (p2 * p2)
}

/// Average distance from each point to its nearest neighbor.
pub fn mean_min_distance(c: &Constellation) -> f64 {
    let pts = c.points();
    let total: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / pts.len() as f64
}

/// Closed-form nearest-neighbor distance of the two-ring alphabet at a given kurtosis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingDistance {
    pub value: f64,
    /// False once the inner ring's own spacing drops below the cross-ring distance.
    pub valid: bool,
}

/// Cross-ring neighbor distance of two-ring APSK as a function of kurtosis.
///
/// With unit power the ring radii satisfy `R1² + R2² = 2` and
/// `R1² R2² = 2 − κ`, so the distance between adjacent points on different
/// rings is `sqrt(2 − 2·sqrt(2 − κ)·cos(2π/M))`.
pub fn dmin_from_kappa(kappa: f64, order: usize) -> Result<RingDistance> {
    if kappa < 1.0 {
        return invalid(format!("kurtosis of a unit-power alphabet is >= 1, got {kappa}"));
    }
    if kappa > 2.0 {
        return invalid(format!("two-ring kurtosis cannot exceed 2, got {kappa}"));
    }
    let angle = 2.0 * PI / order as f64;
    let value = (2.0 - 2.0 * (2.0 - kappa).sqrt() * angle.cos()).sqrt();
    let inner = (1.0 - (kappa - 1.0).sqrt()).sqrt();
    let valid = value <= 2.0 * inner * angle.sin() + 1e-12;
    Ok(RingDistance { value, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn qam4_is_constant_modulus() {
        let c = make_qam(4).unwrap();
        for z in c.points() {
            assert!((z.norm() - 1.0).abs() < 1e-12);
            assert!((z.re.abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
        assert!((kurtosis(&c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qam16_shape() {
        let c = make_qam(16).unwrap();
        assert!((c.mean_power() - 1.0).abs() < 1e-12);
        assert!((kurtosis(&c) - 1.32).abs() < 1e-12);
        assert!((mean_min_distance(&c) - 2.0 / 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn qam_rejects_unsupported_order() {
        assert!(make_qam(8).is_err());
        assert!(make_qam(32).is_err());
    }

    #[test]
    fn psk_shapes() {
        let b = make_psk(2).unwrap();
        assert!((b.point(0) - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((b.point(1) - C64::new(-1.0, 0.0)).norm() < 1e-12);
        assert!((mean_min_distance(&b) - 2.0).abs() < 1e-12);
        let c = make_psk(16).unwrap();
        assert!((kurtosis(&c) - 1.0).abs() < 1e-12);
        assert!((mean_min_distance(&c) - 2.0 * (PI / 16.0).sin()).abs() < 1e-12);
        assert!((mean_min_distance(&c) - 0.3902).abs() < 1e-4);
    }

    #[test]
    fn psk_gray_neighbors_differ_in_one_bit() {
        for m in [2usize, 4, 8, 16] {
            let c = make_psk(m).unwrap();
            for k in 0..m {
                let next = (k + 1) % m;
                assert_eq!((c.label(k) ^ c.label(next)).count_ones(), 1, "M={m} k={k}");
            }
        }
    }

    #[test]
    fn qam_gray_axis_neighbors_differ_in_one_bit() {
        for m in [4usize, 16, 64] {
            let c = make_qam(m).unwrap();
            let pts = c.points();
            let dmin = mean_min_distance(&c);
            for i in 0..m {
                for j in 0..m {
                    if i != j && ((pts[i] - pts[j]).norm() - dmin).abs() < 1e-9 {
                        assert_eq!((c.label(i) ^ c.label(j)).count_ones(), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_are_bijective() {
        for c in [make_qam(16).unwrap(), make_psk(8).unwrap(), make_apsk(ApskSpec::new(0.8)).unwrap()] {
            let mut seen: Vec<u32> = (0..c.order()).map(|m| c.label(m)).collect();
            seen.sort();
            assert_eq!(seen, (0..c.order() as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn apsk_unit_inner_is_psk16() {
        let c = make_apsk(ApskSpec::new(1.0)).unwrap();
        assert!((kurtosis(&c) - 1.0).abs() < 1e-12);
        assert!((mean_min_distance(&c) - 2.0 * (PI / 16.0).sin()).abs() < 1e-12);
    }

    #[test]
    fn apsk_kurtosis_closed_form() {
        let c = make_apsk(ApskSpec::new(0.8)).unwrap();
        let r1sq = 2.0 - 0.64;
        assert!((kurtosis(&c) - (r1sq * r1sq + 0.64 * 0.64) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn apsk_rejects_large_inner_radius() {
        assert!(make_apsk(ApskSpec::new(1.1)).is_err());
    }

    #[test]
    fn dmin_curve_start() {
        let d = dmin_from_kappa(1.0, 16).unwrap();
        assert!((d.value - 2.0 * (PI / 16.0).sin()).abs() < 1e-12);
        assert!(d.valid);
        assert!(dmin_from_kappa(0.9, 16).is_err());
    }

    #[test]
    fn dmin_curve_matches_constructed_apsk() {
        let mut checked = 0;
        for i in 0..=140 {
            let kappa = 1.0 + 0.7 * i as f64 / 140.0;
            let d = dmin_from_kappa(kappa, 16).unwrap();
            let c = make_apsk(ApskSpec::from_kurtosis(kappa).unwrap()).unwrap();
            assert!((kurtosis(&c) - kappa).abs() < 1e-12);
            if d.valid {
                checked += 1;
                assert!((mean_min_distance(&c) - d.value).abs() < 1e-10, "kappa {kappa}");
            } else {
                assert!(mean_min_distance(&c) < d.value);
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn duplicate_points_rejected() {
        let p = vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)];
        assert!(Constellation::with_natural_labels(p).is_err());
    }

    proptest! {
        #[test]
        fn apsk_kurtosis_identity(r2 in 0.05f64..=1.0) {
            let c = make_apsk(ApskSpec::new(r2)).unwrap();
            let s = r2 * r2;
            let expect = ((2.0 - s).powi(2) + s * s) / 2.0;
            prop_assert!((kurtosis(&c) - expect).abs() < 1e-12);
            prop_assert!((c.mean_power() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn arbitrary_alphabets_normalize(raw in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 8)) {
            let pts: Vec<C64> = raw.iter().map(|&(a, b)| C64::new(a, b)).collect();
            if let Ok(c) = Constellation::with_natural_labels(pts) {
                prop_assert!((c.mean_power() - 1.0).abs() < 1e-12);
                prop_assert!(kurtosis(&c) >= 1.0 - 1e-12);
            }
        }
    }
}
