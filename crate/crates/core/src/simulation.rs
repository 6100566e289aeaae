//! Orbit simulation.
//!
//! Floating-point orbits of `x ↦ ℓx mod 1` collapse onto 0 after about
//! 53/log₂ℓ steps. For maps with a linear base the walker keeps `x` as a
//! 128-bit fraction `X / 2¹²⁸` and feeds a fresh uniform base-`ℓ` digit
//! into the low end at every step. The law of the resulting orbit is the
//! law of the true orbit from a uniformly random start inside the
//! `2⁻⁵³`-cell of the requested point.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::torus_maps::{MapSpec, TorusPoint};

const TWO_POW_53_INV: f64 = 1.0 / 9_007_199_254_740_992.0;

/// Deterministic per-orbit stream: stream `index` of the generator seeded
/// by `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct DigitSource {
    ell: u64,
    per_word: u32,
    limit: u64,
    word: u64,
    left: u32,
}

impl DigitSource {
    fn new(ell: u64) -> Self {
        let mut per_word = 0u32;
        let mut limit: u128 = 1;
        while limit * u128::from(ell) <= 1u128 << 64 {
            limit *= u128::from(ell);
            per_word += 1;
        }
        Self {
            ell,
            per_word,
            // 0 marks "every word is acceptable"
            limit: if limit == 1u128 << 64 { 0 } else { limit as u64 },
            word: 0,
            left: 0,
        }
    }

    #[inline]
    fn next(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        if self.left == 0 {
            // rejection keeps the digits exactly uniform
            loop {
                let w = rng.next_u64();
                if self.limit == 0 || w < self.limit {
                    self.word = w;
                    break;
                }
            }
            self.left = self.per_word;
        }
        let d = self.word % self.ell;
        self.word /= self.ell;
        self.left -= 1;
        d
    }
}

enum State {
    Exact { bits: u128, theta: f64 },
    Float(TorusPoint),
}

/// Iterates a map from a starting point; see the module notes.
pub struct Walker<'a> {
    spec: &'a MapSpec,
    state: State,
    rng: ChaCha8Rng,
    digits: Option<DigitSource>,
    fibre: bool,
}

impl<'a> Walker<'a> {
    pub fn new(spec: &'a MapSpec, start: TorusPoint, mut rng: ChaCha8Rng) -> Self {
        if spec.has_linear_base() {
            // keep the 53 bits a float carries, randomize everything below
            let hi = (start.x() * 9_007_199_254_740_992.0) as u128;
            let lo = (u128::from(rng.next_u64()) << 11) ^ u128::from(rng.next_u64() >> 53);
            let bits = (hi << 75) | (lo & ((1u128 << 75) - 1));
            Self {
                spec,
                state: State::Exact {
                    bits,
                    theta: start.theta(),
                },
                rng,
                digits: Some(DigitSource::new(u64::from(spec.ell()))),
                fibre: true,
            }
        } else {
            Self {
                spec,
                state: State::Float(start),
                rng,
                digits: None,
                fibre: true,
            }
        }
    }

    /// Stops updating `θ`. Only meaningful when the base does not depend on
    /// `θ` and the caller never reads `θ`.
    pub fn without_fibre(mut self) -> Self {
        if self.spec.base_is_autonomous() {
            self.fibre = false;
        }
        self
    }

    #[inline]
    pub fn x(&self) -> f64 {
        match &self.state {
            State::Exact { bits, .. } => (bits >> 75) as f64 * TWO_POW_53_INV,
            State::Float(p) => p.x(),
        }
    }

    #[inline]
    pub fn point(&self) -> TorusPoint {
        match &self.state {
            State::Exact { theta, .. } => TorusPoint::new(self.x(), *theta),
            State::Float(p) => *p,
        }
    }

    #[inline]
    pub fn step(&mut self) {
        let x = self.x();
        match &mut self.state {
            State::Exact { bits, theta } => {
                if self.fibre {
                    let s = self.spec.omega_scale();
                    let t = *theta + s * self.spec.omega_coeffs().value(x, *theta);
                    *theta = t.rem_euclid(1.0);
                    if *theta >= 1.0 {
                        *theta = 0.0;
                    }
                }
                let d = self
                    .digits
                    .as_mut()
                    .expect("exact state has a digit source")
                    .next(&mut self.rng);
                *bits = bits
                    .wrapping_mul(u128::from(self.spec.ell()))
                    .wrapping_add(u128::from(d));
            }
            State::Float(p) => {
                if self.fibre {
                    *p = self.spec.eval(*p);
                } else {
                    let (fx, _) = self.spec.lift(p.x(), 0.0);
                    *p = TorusPoint::new(fx, 0.0);
                }
            }
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Uniform point from `rng`.
pub fn uniform_point(rng: &mut impl Rng) -> TorusPoint {
    TorusPoint::new(rng.random(), rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::FourierTable;

    #[test]
    fn doubling_orbit_does_not_collapse() {
        let spec = MapSpec::skew_linear(2, FourierTable::zero()).unwrap();
        let mut w = Walker::new(&spec, TorusPoint::new(0.3, 0.2), stream_rng(1, 0));
        let mut zeros = 0;
        let mut mean = 0.0;
        for _ in 0..10_000 {
            w.step();
            if w.x() == 0.0 {
                zeros += 1;
            }
            mean += w.x();
        }
        assert_eq!(zeros, 0);
        assert!((mean / 10_000.0 - 0.5).abs() < 0.02);
        assert_eq!(w.point().theta(), 0.2);
    }

    #[test]
    fn exact_walker_tracks_float_orbit_initially() {
        let spec = MapSpec::skew_linear(3, FourierTable::sin(0.05, 1, 0)).unwrap();
        let start = TorusPoint::new(0.123456, 0.654321);
        let mut w = Walker::new(&spec, start, stream_rng(2, 0));
        let mut p = start;
        for _ in 0..10 {
            w.step();
            p = spec.eval(p);
            assert!(w.point().distance(&p) < 1e-9);
        }
    }

    #[test]
    fn digits_are_in_range_and_deterministic() {
        let mut src = DigitSource::new(3);
        let mut rng = stream_rng(4, 0);
        let a: Vec<u64> = (0..100).map(|_| src.next(&mut rng)).collect();
        assert!(a.iter().all(|d| *d < 3));
        let mut src = DigitSource::new(3);
        let mut rng = stream_rng(4, 0);
        let b: Vec<u64> = (0..100).map(|_| src.next(&mut rng)).collect();
        assert_eq!(a, b);
        assert_eq!(DigitSource::new(2).per_word, 64);
    }

    #[test]
    fn bits_below_float_precision_are_random() {
        // after 60 doublings x is made of the bits a float cannot carry
        let spec = MapSpec::skew_linear(2, FourierTable::zero()).unwrap();
        let n = 4000;
        let mut mean = 0.0;
        for i in 0..n {
            let mut w = Walker::new(&spec, TorusPoint::new(0.25, 0.0), stream_rng(5, i));
            for _ in 0..60 {
                w.step();
            }
            mean += w.x();
        }
        assert!((mean / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn general_base_uses_float_orbit() {
        let spec = MapSpec::skew_general(3, FourierTable::sin(0.05, 1, 1), FourierTable::cos(0.1, 1, 0)).unwrap();
        let start = TorusPoint::new(0.4, 0.1);
        let mut w = Walker::new(&spec, start, stream_rng(0, 0));
        w.step();
        assert_eq!(w.point(), spec.eval(start));
    }
}
