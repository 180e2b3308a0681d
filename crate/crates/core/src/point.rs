//! Small fixed-dimension Euclidean vectors.
//!
//! Dimensions of interest are tiny (3..=6), so points live inline in a
//! `SmallVec` and hot loops work on raw `&[f64]` slices via the free helpers
//! at the bottom.

use smallvec::SmallVec;

/// A point (or vector) of `R^d`, stored inline for d <= 6.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Point(pub SmallVec<[f64; 6]>);

impl Point {
    pub fn zeros(d: usize) -> Self {
        Point(std::iter::repeat(0.0).take(d).collect())
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Point(SmallVec::from_slice(coords))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn dot(&self, other: &Point) -> f64 {
        dot(&self.0, &other.0)
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        dist_sq(&self.0, &other.0).sqrt()
    }

    pub fn add(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, s: f64) -> Point {
        Point(self.0.iter().map(|a| a * s).collect())
    }

    /// `self += s * other`, in place.
    pub fn add_scaled(&mut self, other: &Point, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    /// Unit vector in the direction of `self`.  Returns `None` for (near) zero.
    pub fn normalized(&self) -> Option<Point> {
        let n = self.norm();
        if n < 1e-300 {
            None
        } else {
            Some(self.scaled(1.0 / n))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }
}

impl std::ops::Index<usize> for Point {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Point {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}
