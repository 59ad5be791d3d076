//! Latin hypercube designs over the unit cube.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParameterPoint, PARAM_DIM, PARAM_NAMES, SODIUM_INDEX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Training,
    Test,
}

impl DesignKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DesignKind::Training => "training",
            DesignKind::Test => "test",
        }
    }
}

/// `m` points in `[0, 1]^p`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    points: Vec<f64>,
    dim: usize,
    seed: u64,
    kind: DesignKind,
}

impl Design {
    pub fn from_rows(points: Vec<f64>, dim: usize, seed: u64, kind: DesignKind) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::domain(format!(
                "{} values cannot be split into points of dimension {dim}",
                points.len()
            )));
        }
        if points.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("design coordinates must lie in [0, 1]"));
        }
        Ok(Self {
            points,
            dim,
            seed,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `m x p` coordinates.
    pub fn as_rows(&self) -> &[f64] {
        &self.points
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().skip(j).step_by(self.dim).copied()
    }

    pub fn parameter_points(&self) -> Result<Vec<ParameterPoint>> {
        if self.dim != PARAM_DIM {
            return Err(Error::domain(format!(
                "design has dimension {}, expected {PARAM_DIM}",
                self.dim
            )));
        }
        (0..self.len())
            .map(|i| ParameterPoint::from_slice(self.point(i)))
            .collect()
    }

    /// Write as CSV with a `t,log10_rho,na_frac` header, one unit-cube point per row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        crate::pipeline::store::write_atomic(path, &buf)
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        if self.dim != PARAM_DIM {
            return Err(Error::domain("only 3-parameter designs have a CSV layout"));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PARAM_NAMES)?;
        for i in 0..self.len() {
            w.write_record(self.point(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Plain Latin hypercube: every coordinate's `m` values fall in `m` distinct
/// strata of width `1/m`, uniformly jittered within each stratum.
pub fn latin_hypercube(m: usize, p: usize, seed: u64, kind: DesignKind) -> Result<Design> {
    if m == 0 || p == 0 {
        return Err(Error::domain(format!(
            "latin hypercube needs m >= 1 and p >= 1 (got m={m}, p={p})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![0.0; m * p];
    let mut strata: Vec<usize> = (0..m).collect();
    let mf = m as f64;
    for j in 0..p {
        strata.shuffle(&mut rng);
        for (i, &k) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            let mut v = (k as f64 + u) / mf;
            // rounding can push a value onto the upper stratum edge
            while v > 0.0 && (v * mf).floor() as usize > k {
                v = v.next_down();
            }
            points[i * p + j] = v;
        }
    }
    Design::from_rows(points, p, seed, kind)
}

/// Copy a design and pin the composition coordinate to `sodium_fraction`.
pub fn fixed_composition_design(base: &Design, sodium_fraction: f64) -> Result<Design> {
    if !(0.0..=1.0).contains(&sodium_fraction) {
        return Err(Error::domain(format!(
            "sodium fraction {sodium_fraction} lies outside [0, 1]"
        )));
    }
    if base.dim != PARAM_DIM {
        return Err(Error::domain("fixed-composition designs need 3 parameters"));
    }
    let mut points = base.points.clone();
    for row in points.chunks_mut(PARAM_DIM) {
        row[SODIUM_INDEX] = sodium_fraction;
    }
    Design::from_rows(points, PARAM_DIM, base.seed, base.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn is_stratified(values: impl Iterator<Item = f64>, m: usize) -> bool {
        let mut seen = vec![false; m];
        for v in values {
            let k = (v * m as f64).floor() as usize;
            if k >= m || seen[k] {
                return false;
            }
            seen[k] = true;
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn training_and_test_sizes_are_stratified() {
        for m in [500, 25] {
            let d = latin_hypercube(m, 3, 7, DesignKind::Training).unwrap();
            assert_eq!(d.len(), m);
            for j in 0..3 {
                assert!(is_stratified(d.column(j), m));
            }
        }
    }

    #[test]
    fn single_point_design() {
        let d = latin_hypercube(1, 3, 0, DesignKind::Test).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.point(0).iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(matches!(
            latin_hypercube(0, 3, 0, DesignKind::Test),
            Err(Error::Domain(_))
        ));
        assert!(latin_hypercube(3, 0, 0, DesignKind::Test).is_err());
    }

    #[test]
    fn same_seed_same_bits() {
        let a = latin_hypercube(50, 3, 11, DesignKind::Training).unwrap();
        let b = latin_hypercube(50, 3, 11, DesignKind::Training).unwrap();
        let c = latin_hypercube(50, 3, 12, DesignKind::Training).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.as_rows(), c.as_rows());
    }

    #[test]
    fn fixed_composition_overwrites_only_sodium() {
        let base = latin_hypercube(25, 3, 2, DesignKind::Test).unwrap();
        for frac in [1.0, 0.0, 0.5] {
            let d = fixed_composition_design(&base, frac).unwrap();
            assert!(d.column(2).all(|v| v == frac));
            assert!(d.column(0).eq(base.column(0)));
            assert!(d.column(1).eq(base.column(1)));
            assert!(is_stratified(d.column(0), 25));
        }
        assert!(fixed_composition_design(&base, 1.5).is_err());
        assert!(fixed_composition_design(&base, -0.1).is_err());
    }

    #[test]
    fn csv_layout() {
        let d = latin_hypercube(2, 3, 0, DesignKind::Test).unwrap();
        let mut buf = Vec::new();
        d.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,log10_rho,na_frac"));
        let row: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(row, d.point(0));
    }

    proptest! {
        #[test]
        fn stratification_holds(m in 1usize..200, p in 1usize..5, seed in any::<u64>()) {
            let d = latin_hypercube(m, p, seed, DesignKind::Training).unwrap();
            for j in 0..p {
                prop_assert!(is_stratified(d.column(j), m));
            }
        }
    }
}
