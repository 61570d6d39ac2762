#![allow(dead_code)]

use std::f64::consts::PI;

use chrono_lens_core::metric::{Family, Metric, MetricSpec, Vec4};

pub fn minkowski(dim: usize) -> Metric {
    Metric::new(MetricSpec::minkowski(dim, 3.0)).unwrap()
}

pub fn bump(dim: usize, amp: f64) -> Metric {
    Metric::new(
        MetricSpec::new(Family::ConformalBump, dim, vec![[-3.0, 3.0]; dim])
            .with_param("amplitude", amp)
            .with_param("width", 0.8)
            .with_param("width_t", 1.5)
            .with_param("center_1", 0.1),
    )
    .unwrap()
}

pub fn product(dim: usize) -> Metric {
    Metric::new(
        MetricSpec::new(Family::ProductSpatial, dim, vec![[-3.0, 3.0]; dim])
            .with_param("amplitude", 0.3)
            .with_param("width", 0.6)
            .with_param("center_1", 0.2),
    )
    .unwrap()
}

pub fn cylinder(dim: usize, radius: f64) -> Metric {
    let mut domain = vec![[-10.0, 10.0]];
    for _ in 1..dim - 1 {
        domain.push([0.2, PI - 0.2]);
    }
    domain.push([0.0, 2.0 * PI]);
    Metric::new(MetricSpec::new(Family::EinsteinCylinder, dim, domain).with_param("radius", radius)).unwrap()
}

pub fn schwarzschild(mass: f64) -> Metric {
    Metric::new(
        MetricSpec::new(Family::SchwarzschildLike, 4, vec![[-20.0, 20.0], [2.5 * mass, 30.0], [0.2, PI - 0.2], [-PI, PI]])
            .with_param("mass", mass),
    )
    .unwrap()
}

/// Every catalog family in every supported dimension.
pub fn catalog() -> Vec<Metric> {
    let mut out = Vec::new();
    for dim in 2..=4 {
        out.push(minkowski(dim));
        out.push(bump(dim, 0.4));
        out.push(product(dim));
        out.push(cylinder(dim, 1.5));
    }
    out.push(schwarzschild(1.0));
    out
}

/// Maps a point of the unit cube into the inner 90% of the metric's domain.
pub fn interior(m: &Metric, u: &[f64]) -> Vec4 {
    let (lo, hi) = (m.lower(), m.upper());
    let mut x = [0.0; 4];
    for i in 0..m.dim() {
        let pad = 0.05 * (hi[i] - lo[i]);
        x[i] = lo[i] + pad + u[i] * (hi[i] - lo[i] - 2.0 * pad);
    }
    x
}
