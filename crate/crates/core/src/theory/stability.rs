//! Amplification factor of the θ-method on the test equation `y' = λ y`.

use num_complex::Complex64;
use rand::Rng;

use crate::error::Result;
pub use crate::temporal::theta_amplification as amplification;

/// Uniform sample of `z = Δt λ` over `[re_min, re_max] × [im_min, im_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityGrid {
    pub re: (f64, f64),
    pub im: (f64, f64),
    /// Points per axis.
    pub resolution: usize,
}

impl Default for StabilityGrid {
    fn default() -> Self {
        Self::left_half_plane(8.0, 401)
    }
}

impl StabilityGrid {
    /// `[−extent, 0] × [−extent, extent]`.
    pub fn left_half_plane(extent: f64, resolution: usize) -> Self {
        Self {
            re: (-extent, 0.0),
            im: (-extent, extent),
            resolution,
        }
    }

    fn coord(range: (f64, f64), k: usize, n: usize) -> f64 {
        if n < 2 {
            return range.0;
        }
        range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64
    }

    /// Points in row-major order, imaginary part fastest.
    pub fn points(&self) -> impl Iterator<Item = Complex64> + '_ {
        let n = self.resolution;
        (0..n).flat_map(move |a| {
            let re = Self::coord(self.re, a, n);
            (0..n).map(move |b| Complex64::new(re, Self::coord(self.im, b, n)))
        })
    }

    pub fn len(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        self.resolution == 0
    }
}

/// `|R_θ(z)| ≤ 1` at every grid point.
pub fn stability_region(theta: f64, grid: &StabilityGrid) -> Result<Vec<bool>> {
    grid.points()
        .map(|z| Ok(amplification(theta, z)?.norm() <= 1.0))
        .collect()
}

/// Grid points with `Re z ≤ 0` where `|R_θ(z)| > 1 + tol`.
pub fn a_stability_violations(theta: f64, grid: &StabilityGrid, tol: f64) -> Result<usize> {
    let mut count = 0;
    for z in grid.points().filter(|z| z.re <= 0.0) {
        if amplification(theta, z)?.norm() > 1.0 + tol {
            count += 1;
        }
    }
    Ok(count)
}

/// Grid points where the forward-Euler mask differs from `|1 + z| ≤ 1`.
pub fn forward_euler_mismatches(grid: &StabilityGrid) -> Result<usize> {
    let mask = stability_region(0.0, grid)?;
    Ok(grid
        .points()
        .zip(mask)
        .filter(|(z, m)| ((1.0 + z).norm() <= 1.0) != *m)
        .count())
}

/// `(|1 − θz|² − |1 + (1−θ)z|²) − (−2a + (2θ−1)(a² + b²))` for `z = a + ib`.
pub fn identity_check(theta: f64, z: Complex64) -> f64 {
    let den = 1.0 - theta * z;
    let num = 1.0 + (1.0 - theta) * z;
    let (a, b) = (z.re, z.im);
    (den.norm_sqr() - num.norm_sqr()) - (-2.0 * a + (2.0 * theta - 1.0) * (a * a + b * b))
}

/// Largest `|identity_check|` over random `θ ∈ [0, 1]`, `z ∈ [−extent, extent]²`.
pub fn identity_sweep(draws: usize, extent: f64, seed: u64) -> f64 {
    let mut rng = crate::rng::stream(seed, &[]);
    (0..draws)
        .map(|_| {
            let theta = rng.random_range(0.0..=1.0);
            let z = Complex64::new(
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
            );
            identity_check(theta, z).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn hand_values() {
        let r = amplification(0.5, Complex64::new(-2.0, 0.0)).unwrap();
        assert_eq!(r, Complex64::new(0.0, 0.0));
        let r = amplification(0.0, Complex64::new(-2.0, 0.0)).unwrap();
        assert_eq!(r.norm(), 1.0);
        let r = amplification(1.0, Complex64::new(-1.0, 0.0)).unwrap();
        assert_eq!(r, Complex64::new(0.5, 0.0));
        assert!(matches!(
            amplification(0.5, Complex64::new(2.0, 0.0)),
            Err(Error::Pole { .. })
        ));
    }

    #[test]
    fn identity_special_cases() {
        let z = Complex64::new(-1.3, 0.7);
        let den = 1.0 - 0.5 * z;
        let num = 1.0 + 0.5 * z;
        assert!((den.norm_sqr() - num.norm_sqr() - 2.6).abs() < 1e-14);
        assert!(identity_check(0.5, z).abs() < 1e-14);
        let z = Complex64::new(0.0, 1.9);
        let theta = 0.8;
        let den = 1.0 - theta * z;
        let num = 1.0 + (1.0 - theta) * z;
        assert!((den.norm_sqr() - num.norm_sqr() - 0.6 * 1.9 * 1.9).abs() < 1e-13);
    }

    #[test]
    fn grid_layout() {
        let g = StabilityGrid::left_half_plane(8.0, 5);
        let pts: Vec<_> = g.points().collect();
        assert_eq!(pts.len(), 25);
        assert_eq!(pts[0], Complex64::new(-8.0, -8.0));
        assert_eq!(pts[4], Complex64::new(-8.0, 8.0));
        assert_eq!(pts[24], Complex64::new(0.0, 8.0));
    }

    #[test]
    fn explicit_method_is_not_a_stable() {
        let g = StabilityGrid::left_half_plane(4.0, 41);
        assert!(a_stability_violations(0.0, &g, 1e-12).unwrap() > 0);
        assert!(a_stability_violations(0.25, &g, 1e-12).unwrap() > 0);
        assert_eq!(a_stability_violations(0.5, &g, 1e-12).unwrap(), 0);
    }
}
