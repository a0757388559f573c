//! The fixed feedforward link function.
//!
//! The link is a piecewise quadratic on `[-1, 1]` that turns the average of two
//! ±1 values into their product: `phi((a + b) / 2) = a * b`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a t^2 + b t + c` on `[lo, hi)`; the last piece is closed on the right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadPiece {
    pub lo: f64,
    pub hi: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadPiece {
    #[inline]
    fn value(&self, t: f64) -> f64 {
        (self.a * t + self.b) * t + self.c
    }

    #[inline]
    fn slope(&self, t: f64) -> f64 {
        2.0 * self.a * t + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkFunction {
    pieces: Vec<QuadPiece>,
}

/// Derived constants of a link function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConstants {
    /// Curvature at the origin, `phi(t) = -1 + c t^2 + ...`.
    pub c: f64,
    /// `sup |phi'|` over `[-1, 1]`.
    pub sup_deriv: f64,
    /// Growth exponent of the end-to-end gradient bound, `log2(sup_deriv) + 1/2`.
    pub g: f64,
    /// Curvature at the ends, `phi'(t) = 2 c' (1 - t)` near 1.
    pub c_prime: f64,
}

const TOL: f64 = 1e-12;

impl Default for LinkFunction {
    fn default() -> Self {
        LinkFunction {
            pieces: vec![
                QuadPiece { lo: -1.0, hi: -0.5, a: -4.0, b: -8.0, c: -3.0 },
                QuadPiece { lo: -0.5, hi: 0.5, a: 4.0, b: 0.0, c: -1.0 },
                QuadPiece { lo: 0.5, hi: 1.0, a: -4.0, b: 8.0, c: -3.0 },
            ],
        }
    }
}

impl LinkFunction {
    /// Registers a custom link after checking every structural requirement.
    pub fn from_pieces(pieces: Vec<QuadPiece>) -> Result<Self> {
        let f = LinkFunction { pieces };
        f.verify()?;
        Ok(f)
    }

    pub fn pieces(&self) -> &[QuadPiece] {
        &self.pieces
    }

    #[inline]
    fn piece(&self, t: f64) -> &QuadPiece {
        let last = self.pieces.len() - 1;
        self.pieces[..last].iter().find(|p| t < p.hi).unwrap_or(&self.pieces[last])
    }

    /// Unchecked evaluation for the hot path; the argument is clamped to `[-1, 1]`
    /// to absorb rounding in convex combinations.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        self.piece(t).value(t)
    }

    #[inline]
    pub fn slope(&self, t: f64) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        self.piece(t).slope(t)
    }

    pub fn phi(&self, t: f64) -> Result<f64> {
        if !(-1.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain(t));
        }
        Ok(self.piece(t).value(t))
    }

    pub fn phi_prime(&self, t: f64) -> Result<f64> {
        if !(-1.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain(t));
        }
        Ok(self.piece(t).slope(t))
    }

    pub fn constants(&self) -> LinkConstants {
        let c = self.piece(0.0).a;
        // phi' is affine on each piece, so its extremes sit at piece endpoints.
        let sup_deriv = self
            .pieces
            .iter()
            .flat_map(|p| [p.slope(p.lo).abs(), p.slope(p.hi).abs()])
            .fold(0.0, f64::max);
        let g = libm::log2(sup_deriv) + 0.5;
        let c_prime = -self.piece(1.0).a;
        LinkConstants { c, sup_deriv, g, c_prime }
    }

    /// Checks the link-function requirements: pinned values and zero slopes at
    /// `0, ±1`, even symmetry, range within `[-1, 1]`, and C¹ junctions.
    pub fn verify(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidLink(msg));
        if self.pieces.is_empty() {
            return bad("no pieces".into());
        }
        if (self.pieces[0].lo + 1.0).abs() > TOL || (self.pieces[self.pieces.len() - 1].hi - 1.0).abs() > TOL {
            return bad("pieces must cover [-1, 1]".into());
        }
        for w in self.pieces.windows(2) {
            let (l, r) = (&w[0], &w[1]);
            if (l.hi - r.lo).abs() > TOL || l.hi <= l.lo {
                return bad(format!("gap or overlap at {}", l.hi));
            }
            let t = r.lo;
            if (l.value(t) - r.value(t)).abs() > TOL {
                return bad(format!("discontinuous at {t}"));
            }
            if (l.slope(t) - r.slope(t)).abs() > TOL {
                return bad(format!("derivative jumps at {t}"));
            }
        }
        for (t, want) in [(0.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            if (self.value(t) - want).abs() > TOL {
                return bad(format!("phi({t}) != {want}"));
            }
            if self.slope(t).abs() > TOL {
                return bad(format!("phi'({t}) != 0"));
            }
        }
        for p in &self.pieces {
            let mut candidates = vec![p.lo, p.hi];
            if p.a != 0.0 {
                let vertex = -p.b / (2.0 * p.a);
                if vertex > p.lo && vertex < p.hi {
                    candidates.push(vertex);
                }
            }
            for t in candidates {
                let y = p.value(t);
                if !(-1.0 - TOL..=1.0 + TOL).contains(&y) {
                    return bad(format!("phi({t}) = {y} leaves [-1, 1]"));
                }
            }
        }
        // Each piece mirrored must coincide with the piece covering the mirror image.
        let probes = 401;
        for i in 0..probes {
            let t = -1.0 + 2.0 * i as f64 / (probes - 1) as f64;
            if (self.value(t) - self.value(-t)).abs() > TOL {
                return bad(format!("not symmetric at {t}"));
            }
        }
        for p in &self.pieces {
            for t in [p.lo, p.hi, 0.5 * (p.lo + p.hi)] {
                if (self.value(t) - self.value(-t)).abs() > TOL {
                    return bad(format!("not symmetric at {t}"));
                }
            }
        }
        Ok(())
    }
}
