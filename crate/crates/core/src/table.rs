//! Table schema, sparse frequency tables and microdata ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One key variable of a released table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub levels: u32,
    /// Whether level codes carry a meaningful order (Age bands, Income groups).
    pub ordinal: bool,
}

impl Attribute {
    pub fn ordinal(name: impl Into<String>, levels: u32) -> Self {
        Self {
            name: name.into(),
            levels,
            ordinal: true,
        }
    }

    pub fn nominal(name: impl Into<String>, levels: u32) -> Self {
        Self {
            name: name.into(),
            levels,
            ordinal: false,
        }
    }
}

/// Ordered attribute list defining the cell grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    attributes: Vec<Attribute>,
}

impl TableSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Schema("a table needs at least one attribute".into()));
        }
        let mut seen = BTreeSet::new();
        for attr in &attributes {
            if attr.levels == 0 {
                return Err(Error::Schema(format!(
                    "attribute `{}` has zero levels",
                    attr.name
                )));
            }
            if !seen.insert(attr.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate attribute name `{}`",
                    attr.name
                )));
            }
        }
        Ok(Self { attributes })
    }

    /// Number of attributes, `m`.
    pub fn m(&self) -> usize {
        self.attributes.len()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute(&self, index: usize) -> &Attribute {
        &self.attributes[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.attributes.iter().map(|a| a.levels)
    }

    /// Total number of cells `K`, structural zeros included.
    pub fn cell_count(&self) -> u128 {
        self.levels().map(u128::from).product()
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        key.len() == self.m()
            && key
                .coords()
                .iter()
                .zip(self.levels())
                .all(|(&c, levels)| c < levels)
    }

    pub fn check_key(&self, key: &CellKey) -> Result<()> {
        if key.len() != self.m() {
            return Err(Error::Schema(format!(
                "cell {key} has {} coordinates, schema has {}",
                key.len(),
                self.m()
            )));
        }
        for (i, (&c, attr)) in key.coords().iter().zip(&self.attributes).enumerate() {
            if c >= attr.levels {
                return Err(Error::Schema(format!(
                    "cell {key}: coordinate {i} (`{}`) = {c} exceeds {} levels",
                    attr.name, attr.levels
                )));
            }
        }
        Ok(())
    }

    /// Schema restricted to `attrs`, in the given order.
    pub fn sub_schema(&self, attrs: &[usize]) -> Result<TableSchema> {
        check_attr_subset(attrs, self.m())?;
        TableSchema::new(attrs.iter().map(|&i| self.attributes[i].clone()).collect())
    }

    /// Every cell of the grid in lexicographic order.
    pub fn cells(&self) -> CellIter {
        CellIter {
            levels: self.levels().collect(),
            next: Some(vec![0; self.m()]),
        }
    }
}

fn check_attr_subset(attrs: &[usize], m: usize) -> Result<()> {
    if attrs.is_empty() {
        return Err(Error::InvalidParameter(
            "attribute subset must be nonempty".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for &a in attrs {
        if a >= m {
            return Err(Error::InvalidParameter(format!(
                "attribute index {a} out of range for m = {m}"
            )));
        }
        if !seen.insert(a) {
            return Err(Error::InvalidParameter(format!(
                "attribute index {a} repeated"
            )));
        }
    }
    Ok(())
}

/// Odometer over all cells of a schema.
pub struct CellIter {
    levels: Vec<u32>,
    next: Option<Vec<u32>>,
}

impl Iterator for CellIter {
    type Item = CellKey;

    fn next(&mut self) -> Option<CellKey> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut i = succ.len();
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            succ[i] += 1;
            if succ[i] < self.levels[i] {
                self.next = Some(succ);
                break;
            }
            succ[i] = 0;
        }
        Some(CellKey(current))
    }
}

/// Cell index `k = (k_1, ..., k_m)` with 0-based level codes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey(Vec<u32>);

impl CellKey {
    pub fn new(coords: Vec<u32>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn project(&self, attrs: &[usize]) -> CellKey {
        CellKey(attrs.iter().map(|&i| self.0[i]).collect())
    }
}

impl From<Vec<u32>> for CellKey {
    fn from(coords: Vec<u32>) -> Self {
        Self(coords)
    }
}

impl<const N: usize> From<[u32; N]> for CellKey {
    fn from(coords: [u32; N]) -> Self {
        Self(coords.to_vec())
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str(")")
    }
}

/// Sparse frequency table: absent cells have count zero.
///
/// Used for both the sample `f` and the population `F`. Iteration is in
/// lexicographic key order, so everything derived from a table is
/// deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    schema: Arc<TableSchema>,
    counts: BTreeMap<CellKey, u64>,
    total: u64,
}

impl FreqTable {
    pub fn empty(schema: Arc<TableSchema>) -> Self {
        Self {
            schema,
            counts: BTreeMap::new(),
            total: 0,
        }
    }

    /// Builds a table from `(cell, count)` pairs. Repeated cells accumulate and
    /// zero counts are dropped.
    pub fn from_counts<I>(schema: Arc<TableSchema>, counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (CellKey, u64)>,
    {
        let mut table = Self::empty(schema);
        for (key, count) in counts {
            table.schema.check_key(&key)?;
            table.add(key, count);
        }
        Ok(table)
    }

    fn add(&mut self, key: CellKey, count: u64) {
        if count == 0 {
            return;
        }
        *self.counts.entry(key).or_insert(0) += count;
        self.total += count;
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<TableSchema> {
        &self.schema
    }

    pub fn get(&self, key: &CellKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    /// Sum of all counts (`n` for a sample, `N` for a population).
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Number of nonzero cells.
    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CellKey, u64)> + '_ {
        self.counts.iter().map(|(k, &c)| (k, c))
    }

    /// Cells with count exactly one, sorted.
    pub fn sample_uniques(&self) -> Vec<CellKey> {
        self.iter()
            .filter(|&(_, c)| c == 1)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Collapses the table onto `attrs` (in the given order).
    pub fn margin(&self, attrs: &[usize]) -> Result<FreqTable> {
        let sub = Arc::new(self.schema.sub_schema(attrs)?);
        let mut out = FreqTable::empty(sub);
        for (key, count) in self.iter() {
            out.add(key.project(attrs), count);
        }
        Ok(out)
    }

    /// Same counts re-labelled with a compatible schema (identical level counts).
    pub fn with_schema(self, schema: Arc<TableSchema>) -> Result<FreqTable> {
        let same_shape = schema.m() == self.schema.m()
            && schema
                .levels()
                .zip(self.schema.levels())
                .all(|(a, b)| a == b);
        if !same_shape {
            return Err(Error::TableMismatch(
                "schemas differ in dimension or level counts".into(),
            ));
        }
        Ok(FreqTable { schema, ..self })
    }
}

/// Integer-coded microdata: one level vector per respondent.
///
/// Auxiliary columns carry attributes that are not part of the released
/// table but may define post-strata (a geography code, for instance).
#[derive(Debug, Clone)]
pub struct Microdata {
    schema: Arc<TableSchema>,
    records: Vec<Vec<u32>>,
    auxiliary: BTreeMap<String, Vec<u32>>,
}

impl Microdata {
    pub fn new(
        schema: Arc<TableSchema>,
        records: Vec<Vec<u32>>,
        auxiliary: BTreeMap<String, Vec<u32>>,
    ) -> Result<Self> {
        for (name, column) in &auxiliary {
            if column.len() != records.len() {
                return Err(Error::Schema(format!(
                    "auxiliary attribute `{name}` has {} values for {} records",
                    column.len(),
                    records.len()
                )));
            }
            if schema.index_of(name).is_some() {
                return Err(Error::Schema(format!(
                    "auxiliary attribute `{name}` shadows a table attribute"
                )));
            }
        }
        Ok(Self {
            schema,
            records,
            auxiliary,
        })
    }

    /// One record per counted unit of `table`, in key order.
    pub fn from_table(table: &FreqTable) -> Self {
        let mut records = Vec::with_capacity(table.total() as usize);
        for (key, count) in table.iter() {
            for _ in 0..count {
                records.push(key.coords().to_vec());
            }
        }
        Self {
            schema: table.schema_arc().clone(),
            records,
            auxiliary: BTreeMap::new(),
        }
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Vec<u32>] {
        &self.records
    }

    pub fn auxiliary(&self) -> &BTreeMap<String, Vec<u32>> {
        &self.auxiliary
    }

    /// Values of a table or auxiliary attribute, one per record.
    pub fn column(&self, name: &str) -> Option<Vec<u32>> {
        if let Some(i) = self.schema.index_of(name) {
            return Some(self.records.iter().map(|r| r[i]).collect());
        }
        self.auxiliary.get(name).cloned()
    }

    /// Record keys in a release schema whose attributes are drawn (by name)
    /// from this microdata's schema.
    pub fn release_keys(&self, release: &TableSchema) -> Result<Vec<CellKey>> {
        let mut map = Vec::with_capacity(release.m());
        for attr in release.attributes() {
            let i = self.schema.index_of(&attr.name).ok_or_else(|| {
                Error::Schema(format!(
                    "release attribute `{}` not present in microdata",
                    attr.name
                ))
            })?;
            if self.schema.attribute(i).levels != attr.levels {
                return Err(Error::Schema(format!(
                    "release attribute `{}` has {} levels, microdata has {}",
                    attr.name,
                    attr.levels,
                    self.schema.attribute(i).levels
                )));
            }
            map.push(i);
        }
        self.validate()?;
        Ok(self
            .records
            .iter()
            .map(|r| CellKey(map.iter().map(|&i| r[i]).collect()))
            .collect())
    }

    fn validate(&self) -> Result<()> {
        for (index, record) in self.records.iter().enumerate() {
            if record.len() != self.schema.m() {
                return Err(Error::Schema(format!(
                    "record {index} has {} values, schema has {}",
                    record.len(),
                    self.schema.m()
                )));
            }
            for (&level, attr) in record.iter().zip(self.schema.attributes()) {
                if level >= attr.levels {
                    return Err(Error::LevelOutOfRange {
                        record: index,
                        attribute: attr.name.clone(),
                        level: i64::from(level),
                        levels: attr.levels,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Cross-tabulates microdata into a frequency table over its schema.
pub fn ingest_microdata(rows: &Microdata) -> Result<FreqTable> {
    rows.validate()?;
    let mut table = FreqTable::empty(rows.schema.clone());
    for record in &rows.records {
        table.add(CellKey(record.clone()), 1);
    }
    Ok(table)
}
