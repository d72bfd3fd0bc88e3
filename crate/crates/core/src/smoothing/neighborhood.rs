//! Local neighborhoods of a cell and the polynomial design built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::table::{CellKey, TableSchema};

/// What to do with neighborhood cells that fall outside the table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Keep them as virtual cells with frequency zero.
    #[default]
    ZeroFill,
    /// Drop them, so neighborhoods shrink near the edges.
    Shrink,
}

/// Neighborhood shape and local polynomial degree.
///
/// Attributes in `fixed` keep the center's level. Every other attribute
/// varies by at most `c` levels, and when `d` is set the total absolute
/// offset over the varying attributes is at most `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    #[serde(default)]
    pub fixed: Vec<usize>,
    pub c: u32,
    #[serde(default)]
    pub d: Option<u32>,
    /// Polynomial degree `t`.
    pub degree: u32,
    #[serde(default)]
    pub boundary: BoundaryMode,
}

impl NeighborhoodSpec {
    /// Box neighborhood over all attributes.
    pub fn cube(c: u32, degree: u32) -> Self {
        Self {
            fixed: Vec::new(),
            c,
            d: None,
            degree,
            boundary: BoundaryMode::ZeroFill,
        }
    }

    pub fn with_fixed(mut self, fixed: Vec<usize>) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn with_budget(mut self, d: u32) -> Self {
        self.d = Some(d);
        self
    }

    pub fn with_boundary(mut self, boundary: BoundaryMode) -> Self {
        self.boundary = boundary;
        self
    }

    /// Checks the shape against a table with `m` attributes.
    pub fn validate(&self, m: usize) -> Result<()> {
        let mut seen = vec![false; m];
        for &i in &self.fixed {
            if i >= m {
                return Err(Error::InvalidParameter(format!(
                    "fixed attribute index {i} out of range for m = {m}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidParameter(format!(
                    "fixed attribute index {i} repeated"
                )));
            }
        }
        if self.degree == 0 {
            return Err(Error::InvalidParameter(
                "polynomial degree must be at least 1".into(),
            ));
        }
        if self.fixed.len() < m && self.c == 0 {
            return Err(Error::InvalidParameter(
                "box radius c must be at least 1 when attributes vary".into(),
            ));
        }
        if let Some(d) = self.d {
            if d < self.c {
                return Err(Error::InvalidParameter(format!(
                    "L1 budget d = {d} is smaller than c = {}",
                    self.c
                )));
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate), and also requires every varying
    /// attribute to be ordinal.
    pub fn validate_for(&self, schema: &TableSchema) -> Result<()> {
        self.validate(schema.m())?;
        for i in self.varying(schema.m()) {
            let attr = schema.attribute(i);
            if !attr.ordinal {
                return Err(Error::InvalidParameter(format!(
                    "attribute `{}` is not ordinal; fix it or declare an ordering",
                    attr.name
                )));
            }
        }
        Ok(())
    }

    /// Indices of the attributes that vary, ascending.
    pub fn varying(&self, m: usize) -> Vec<usize> {
        (0..m).filter(|i| !self.fixed.contains(i)).collect()
    }

    /// Number of polynomial coefficients, intercept included.
    pub fn coefficient_count(&self, m: usize) -> usize {
        1 + self.degree as usize * self.varying(m).len()
    }

    /// All admissible offset vectors (length `m`, zero on fixed attributes) in
    /// lexicographic order.
    pub fn offsets(&self, m: usize) -> Vec<Vec<i32>> {
        let varying = self.varying(m);
        let c = self.c as i32;
        let mut out = Vec::new();
        let mut digits = vec![-c; varying.len()];
        loop {
            let l1: u32 = digits.iter().map(|d| d.unsigned_abs()).sum();
            if self.d.is_none_or(|d| l1 <= d) {
                let mut offset = vec![0; m];
                for (&i, &d) in varying.iter().zip(&digits) {
                    offset[i] = d;
                }
                out.push(offset);
            }
            // advance the odometer, last varying attribute fastest
            let mut pos = digits.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                if digits[pos] < c {
                    digits[pos] += 1;
                    break;
                }
                digits[pos] = -c;
            }
        }
    }
}

/// One member of a neighborhood. `cell` is `None` for virtual cells outside
/// the table, which carry frequency zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbor {
    pub offset: Vec<i32>,
    pub cell: Option<CellKey>,
}

/// The neighborhood `M` of `center`, virtual boundary cells included.
pub fn neighborhood(
    center: &CellKey,
    spec: &NeighborhoodSpec,
    schema: &TableSchema,
) -> Result<Vec<Neighbor>> {
    schema.check_key(center)?;
    spec.validate(schema.m())?;
    Ok(spec
        .offsets(schema.m())
        .into_iter()
        .map(|offset| {
            let cell = shift(center, &offset, schema);
            Neighbor { offset, cell }
        })
        .collect())
}

pub(crate) fn shift(center: &CellKey, offset: &[i32], schema: &TableSchema) -> Option<CellKey> {
    let mut coords = Vec::with_capacity(offset.len());
    for ((&c, &o), levels) in center.coords().iter().zip(offset).zip(schema.levels()) {
        let v = i64::from(c) + i64::from(o);
        if v < 0 || v >= i64::from(levels) {
            return None;
        }
        coords.push(v as u32);
    }
    Some(CellKey::new(coords))
}

/// Regressors of the local model at `offset = k' - k`:
/// `(1, δ_1, ..., δ_v, δ_1², ..., δ_v², ..., δ_1^t, ..., δ_v^t)` over the
/// varying attributes, with no cross terms.
pub fn design_row<T: Real>(offset: &[i32], spec: &NeighborhoodSpec) -> Vec<T> {
    let varying = spec.varying(offset.len());
    let mut row = Vec::with_capacity(1 + spec.degree as usize * varying.len());
    row.push(T::one());
    for power in 1..=spec.degree as i32 {
        for &i in &varying {
            row.push(T::lit(f64::from(offset[i])).powi(power));
        }
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Attribute;
    use proptest::prelude::*;

    /// Independent count: number of vectors in `[-c, c]^v` with L1 norm `<= d`,
    /// by dynamic programming over the attributes.
    fn count_by_dp(v: usize, c: i32, d: Option<i32>) -> usize {
        let budget = d.unwrap_or(c * v as i32) as usize;
        let mut ways = vec![0usize; budget + 1];
        ways[0] = 1;
        for _ in 0..v {
            let mut next = vec![0usize; budget + 1];
            for (used, &w) in ways.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                for o in -c..=c {
                    let u = used + o.unsigned_abs() as usize;
                    if u <= budget {
                        next[u] += w;
                    }
                }
            }
            ways = next;
        }
        ways.iter().sum()
    }

    #[test]
    fn known_cardinalities() {
        assert_eq!(NeighborhoodSpec::cube(3, 1).offsets(2).len(), 49);
        let sex_fixed = |c| NeighborhoodSpec::cube(c, 2).with_fixed(vec![0]);
        assert_eq!(sex_fixed(2).offsets(4).len(), 125);
        assert_eq!(sex_fixed(2).with_budget(6).offsets(5).len(), 545);
        assert_eq!(sex_fixed(2).with_budget(8).offsets(5).len(), 625);
        assert_eq!(sex_fixed(3).with_budget(6).offsets(5).len(), 1025);
        assert_eq!(sex_fixed(2).with_budget(4).offsets(6).len(), 581);
        assert_eq!(sex_fixed(3).offsets(3).len(), 49);
    }

    #[test]
    fn six_attribute_budget_six_count() {
        let spec = NeighborhoodSpec::cube(2, 2)
            .with_fixed(vec![0])
            .with_budget(6);
        assert_eq!(spec.offsets(6).len(), 1893);
        assert_eq!(count_by_dp(5, 2, Some(6)), 1893);
    }

    #[test]
    fn offsets_are_lexicographic_and_fix_attributes() {
        let spec = NeighborhoodSpec::cube(1, 1).with_fixed(vec![1]);
        let offs = spec.offsets(3);
        assert_eq!(offs.len(), 9);
        assert_eq!(offs[0], vec![-1, 0, -1]);
        assert_eq!(offs[1], vec![-1, 0, 0]);
        assert_eq!(offs[8], vec![1, 0, 1]);
        assert!(offs.iter().all(|o| o[1] == 0));
        let mut sorted = offs.clone();
        sorted.sort();
        assert_eq!(sorted, offs);
    }

    #[test]
    fn all_fixed_is_the_center_alone() {
        let spec = NeighborhoodSpec::cube(0, 1).with_fixed(vec![0, 1]);
        spec.validate(2).unwrap();
        assert_eq!(spec.offsets(2), vec![vec![0, 0]]);
    }

    #[test]
    fn validation() {
        assert!(NeighborhoodSpec::cube(0, 1).validate(2).is_err());
        assert!(NeighborhoodSpec::cube(1, 0).validate(2).is_err());
        assert!(NeighborhoodSpec::cube(2, 1)
            .with_budget(1)
            .validate(2)
            .is_err());
        assert!(NeighborhoodSpec::cube(2, 1)
            .with_fixed(vec![2])
            .validate(2)
            .is_err());
        assert!(NeighborhoodSpec::cube(2, 1)
            .with_fixed(vec![0, 0])
            .validate(2)
            .is_err());
        let schema = TableSchema::new(vec![
            Attribute::nominal("sex", 2),
            Attribute::ordinal("age", 5),
        ])
        .unwrap();
        assert!(NeighborhoodSpec::cube(1, 1).validate_for(&schema).is_err());
        assert!(NeighborhoodSpec::cube(1, 1)
            .with_fixed(vec![0])
            .validate_for(&schema)
            .is_ok());
    }

    #[test]
    fn virtual_cells_at_boundary() {
        let schema =
            TableSchema::new(vec![Attribute::ordinal("a", 4), Attribute::ordinal("b", 4)]).unwrap();
        let m = neighborhood(
            &CellKey::from([0, 0]),
            &NeighborhoodSpec::cube(1, 1),
            &schema,
        )
        .unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.iter().filter(|n| n.cell.is_some()).count(), 4);
        assert_eq!(m[4].cell, Some(CellKey::from([0, 0])));
        assert_eq!(m[8].cell, Some(CellKey::from([1, 1])));
        assert!(m[0].cell.is_none());
    }

    #[test]
    fn design_rows() {
        let t2 = NeighborhoodSpec::cube(3, 2);
        assert_eq!(
            design_row::<f64>(&[0, 0], &t2),
            vec![1.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            design_row::<f64>(&[1, -2], &t2),
            vec![1.0, 1.0, -2.0, 1.0, 4.0]
        );
        let t1 = NeighborhoodSpec::cube(3, 1);
        assert_eq!(design_row::<f64>(&[3, 0], &t1), vec![1.0, 3.0, 0.0]);
        let fixed = NeighborhoodSpec::cube(2, 2).with_fixed(vec![0]);
        assert_eq!(
            design_row::<f64>(&[0, 2, -1], &fixed),
            vec![1.0, 2.0, -1.0, 4.0, 1.0]
        );
        assert_eq!(fixed.coefficient_count(3), 5);
    }

    proptest! {
        #[test]
        fn cardinality_matches_independent_count(
            m in 1usize..6,
            n_fixed in 0usize..3,
            c in 1u32..4,
            extra in proptest::option::of(0u32..6),
        ) {
            let n_fixed = n_fixed.min(m - 1);
            let spec = NeighborhoodSpec {
                fixed: (0..n_fixed).collect(),
                c,
                d: extra.map(|e| c + e),
                degree: 1,
                boundary: BoundaryMode::ZeroFill,
            };
            let v = m - n_fixed;
            let got = spec.offsets(m).len();
            prop_assert_eq!(got, count_by_dp(v, c as i32, spec.d.map(|d| d as i32)));
            if spec.d.is_none() {
                prop_assert_eq!(got, (2 * c as usize + 1).pow(v as u32));
            }
        }
    }
}
