//! Closed-form range geometry: linearised trilateration, two-circle
//! intersection with a prior, and dilution of precision.

use nalgebra::{Matrix2, Vector2};

use super::LocalizeError;
use crate::model::{distance, Position2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trilateration {
    pub position: Position2D,
    /// RMS of `|x - a_i| - r_i` at the solution, meters.
    pub residual: f64,
}

/// Least-squares solution of the circle system linearised by subtracting the
/// first equation. Needs at least three non-collinear anchors.
pub fn trilaterate(anchors: &[Position2D], ranges: &[f64]) -> Result<Trilateration, LocalizeError> {
    if anchors.len() != ranges.len() {
        return Err(LocalizeError::LengthMismatch {
            anchors: anchors.len(),
            ranges: ranges.len(),
        });
    }
    if anchors.len() < 3 {
        return Err(LocalizeError::TooFewAnchors {
            needed: 3,
            got: anchors.len(),
        });
    }
    // Work relative to the first anchor to keep the squares small.
    let a0 = anchors[0];
    let r0 = ranges[0];
    let mut normal = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    let mut row_scale = 0.0f64;
    for (&a, &r) in anchors.iter().zip(ranges).skip(1) {
        let d = a - a0;
        let row = Vector2::new(2.0 * d.x, 2.0 * d.y);
        let b = r0 * r0 - r * r + d.dot(&d);
        normal += row * row.transpose();
        rhs += row * b;
        row_scale = row_scale.max(row.norm_squared());
    }
    let det = normal.determinant();
    if row_scale == 0.0 || det.abs() <= 1e-10 * row_scale * row_scale {
        return Err(LocalizeError::RankDeficient);
    }
    let sol = normal.try_inverse().ok_or(LocalizeError::RankDeficient)? * rhs;
    let position = a0 + Position2D::new(sol.x, sol.y);
    let residual = (anchors
        .iter()
        .zip(ranges)
        .map(|(&a, &r)| (distance(position, a) - r).powi(2))
        .sum::<f64>()
        / anchors.len() as f64)
        .sqrt();
    Ok(Trilateration { position, residual })
}

/// Intersection of two range circles, resolving the mirror ambiguity with
/// `prior`. Circles that miss each other by at most `tolerance` yield the
/// midpoint of their closest approach.
pub fn bilaterate_with_prior(
    a1: Position2D,
    r1: f64,
    a2: Position2D,
    r2: f64,
    prior: Position2D,
    tolerance: f64,
) -> Result<Position2D, LocalizeError> {
    let d = distance(a1, a2);
    if d < 1e-9 {
        return Err(LocalizeError::Concentric);
    }
    let u = (a2 - a1) * (1.0 / d);

    if d > r1 + r2 {
        let gap = d - (r1 + r2);
        if gap > tolerance {
            return Err(LocalizeError::NoIntersection { gap, tolerance });
        }
        let p1 = a1 + u * r1;
        let p2 = a2 - u * r2;
        return Ok((p1 + p2) * 0.5);
    }
    if d < (r1 - r2).abs() {
        let gap = (r1 - r2).abs() - d;
        if gap > tolerance {
            return Err(LocalizeError::NoIntersection { gap, tolerance });
        }
        // one circle inside the other: closest points lie on the centre line
        let (p1, p2) = if r1 >= r2 {
            (a1 + u * r1, a2 + u * r2)
        } else {
            (a2 - u * r2, a1 - u * r1)
        };
        return Ok((p1 + p2) * 0.5);
    }

    let along = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d);
    let h = (r1 * r1 - along * along).max(0.0).sqrt();
    let base = a1 + u * along;
    let perp = Position2D::new(-u.y, u.x);
    let plus = base + perp * h;
    let minus = base - perp * h;
    if distance(minus, prior) < distance(plus, prior) {
        Ok(minus)
    } else {
        Ok(plus)
    }
}

/// Horizontal dilution of precision of range measurements from `anchors`
/// evaluated at `at`; `None` when the geometry is singular.
pub fn gdop(anchors: &[Position2D], at: Position2D) -> Option<f64> {
    let mut info = Matrix2::zeros();
    for &a in anchors {
        let d = at - a;
        let n = d.norm();
        if n < 1e-9 {
            continue;
        }
        let h = Vector2::new(d.x / n, d.y / n);
        info += h * h.transpose();
    }
    if info.determinant().abs() < 1e-9 {
        return None;
    }
    info.try_inverse().map(|inv| inv.trace().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trilaterate_three_four_five() {
        let anchors = [Position2D::new(0.0, 0.0), Position2D::new(4.0, 0.0), Position2D::new(0.0, 3.0)];
        let ranges = [5.0, 17f64.sqrt(), 10f64.sqrt()];
        // (3,4) satisfies all three range equations
        for (a, r) in anchors.iter().zip(&ranges) {
            assert!((distance(Position2D::new(3.0, 4.0), *a) - r).abs() < 1e-12);
        }
        let fix = trilaterate(&anchors, &ranges).unwrap();
        assert!(distance(fix.position, Position2D::new(3.0, 4.0)) < 1e-9);
        assert!(fix.residual < 1e-9);
    }

    #[test]
    fn trilaterate_pins_zero_range_anchor() {
        let anchors = [Position2D::new(5.0, 5.0), Position2D::new(20.0, 5.0), Position2D::new(5.0, 30.0)];
        let ranges = [0.0, 15.0, 25.0];
        let fix = trilaterate(&anchors, &ranges).unwrap();
        assert!(distance(fix.position, anchors[0]) < 1e-9);
    }

    #[test]
    fn trilaterate_rejects_collinear() {
        let anchors = [Position2D::new(0.0, 0.0), Position2D::new(1.0, 1.0), Position2D::new(3.0, 3.0)];
        assert_eq!(trilaterate(&anchors, &[1.0, 1.0, 1.0]), Err(LocalizeError::RankDeficient));
        assert!(matches!(
            trilaterate(&anchors[..2], &[1.0, 1.0]),
            Err(LocalizeError::TooFewAnchors { .. })
        ));
    }

    #[test]
    fn bilateration_picks_side_of_prior() {
        let a1 = Position2D::new(0.0, 0.0);
        let a2 = Position2D::new(8.0, 0.0);
        let up = bilaterate_with_prior(a1, 5.0, a2, 5.0, Position2D::new(4.0, 10.0), 0.4).unwrap();
        assert!(distance(up, Position2D::new(4.0, 3.0)) < 1e-12);
        let down = bilaterate_with_prior(a1, 5.0, a2, 5.0, Position2D::new(4.0, -10.0), 0.4).unwrap();
        assert!(distance(down, Position2D::new(4.0, -3.0)) < 1e-12);
        assert_eq!(
            bilaterate_with_prior(a1, 5.0, a1, 3.0, Position2D::ORIGIN, 0.4),
            Err(LocalizeError::Concentric)
        );
    }

    #[test]
    fn bilateration_near_miss_uses_closest_approach() {
        let a1 = Position2D::new(0.0, 0.0);
        let a2 = Position2D::new(10.0, 0.0);
        let p = bilaterate_with_prior(a1, 4.9, a2, 4.9, Position2D::new(5.0, 1.0), 0.4).unwrap();
        assert!(distance(p, Position2D::new(5.0, 0.0)) < 1e-12);
        assert!(bilaterate_with_prior(a1, 3.0, a2, 3.0, Position2D::ORIGIN, 0.4).is_err());
        // nested circles
        let p = bilaterate_with_prior(a1, 10.0, Position2D::new(2.0, 0.0), 7.9, Position2D::ORIGIN, 0.4).unwrap();
        assert!(distance(p, Position2D::new(9.95, 0.0)) < 1e-12);
    }

    #[test]
    fn gdop_of_square_layout() {
        // four orthogonal unit vectors: H^T H = 2 I, trace of inverse = 1
        let anchors = [
            Position2D::new(10.0, 0.0),
            Position2D::new(-10.0, 0.0),
            Position2D::new(0.0, 10.0),
            Position2D::new(0.0, -10.0),
        ];
        assert!((gdop(&anchors, Position2D::ORIGIN).unwrap() - 1.0).abs() < 1e-12);
        assert!(gdop(&anchors[..2], Position2D::ORIGIN).is_none());
    }

    fn non_collinear() -> impl Strategy<Value = [Position2D; 3]> {
        prop::array::uniform3((-100.0..100.0f64, -100.0..100.0f64))
            .prop_map(|a| a.map(|(x, y)| Position2D::new(x, y)))
            .prop_filter("non-collinear", |a| {
                let u = a[1] - a[0];
                let v = a[2] - a[0];
                (u.x * v.y - u.y * v.x).abs() > 50.0
            })
    }

    proptest! {
        #[test]
        fn trilaterate_recovers_truth(anchors in non_collinear(), tx in -100.0..100.0f64, ty in -100.0..100.0f64) {
            let truth = Position2D::new(tx, ty);
            let ranges: Vec<f64> = anchors.iter().map(|&a| distance(truth, a)).collect();
            let fix = trilaterate(&anchors, &ranges).unwrap();
            prop_assert!(distance(fix.position, truth) < 1e-6);
            prop_assert!(fix.residual < 1e-6);
        }

        #[test]
        fn trilaterate_is_translation_equivariant(
            anchors in non_collinear(), tx in -100.0..100.0f64, ty in -100.0..100.0f64,
            sx in -500.0..500.0f64, sy in -500.0..500.0f64,
        ) {
            let truth = Position2D::new(tx, ty);
            let shift = Position2D::new(sx, sy);
            let ranges: Vec<f64> = anchors.iter().map(|&a| distance(truth, a) + 0.5).collect();
            let moved: Vec<Position2D> = anchors.iter().map(|&a| a + shift).collect();
            let p0 = trilaterate(&anchors, &ranges).unwrap().position;
            let p1 = trilaterate(&moved, &ranges).unwrap().position;
            prop_assert!(distance(p0 + shift, p1) < 1e-6);
        }
    }
}
