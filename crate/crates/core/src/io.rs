//! CSV formats for tables, microdata and post-stratum margins.
//!
//! Frequency tables are written as one column per attribute plus a `count`
//! column, zero cells omitted. Attribute headers carry the level count as
//! `name:levels`, and `name:levels:nominal` marks an unordered attribute, so a
//! table file is self-describing. Plain `name` headers are accepted on input;
//! the level count is then taken from a supplied schema or inferred as the
//! largest code plus one.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::argus::PostStrataSpec;
use crate::error::{Error, Result};
use crate::table::{Attribute, CellKey, FreqTable, Microdata, TableSchema};

pub const COUNT_COLUMN: &str = "count";
pub const POPULATION_COUNT_COLUMN: &str = "population_count";

#[derive(Debug, Clone, PartialEq, Eq)]
struct HeaderAttr {
    name: String,
    levels: Option<u32>,
    ordinal: bool,
}

fn parse_header(cell: &str) -> Result<HeaderAttr> {
    let mut parts = cell.trim().split(':');
    let name = parts.next().unwrap_or_default().to_string();
    if name.is_empty() {
        return Err(Error::Csv("empty attribute name in header".into()));
    }
    let levels = match parts.next() {
        None => None,
        Some(l) => Some(l.parse::<u32>().map_err(|_| {
            Error::Csv(format!(
                "header `{cell}`: level count `{l}` is not an integer"
            ))
        })?),
    };
    let ordinal = match parts.next() {
        None | Some("ordinal") => true,
        Some("nominal") => false,
        Some(other) => {
            return Err(Error::Csv(format!(
                "header `{cell}`: unknown attribute kind `{other}`"
            )))
        }
    };
    if parts.next().is_some() {
        return Err(Error::Csv(format!("header `{cell}`: too many `:` fields")));
    }
    Ok(HeaderAttr {
        name,
        levels,
        ordinal,
    })
}

fn header_cell(attr: &Attribute) -> String {
    if attr.ordinal {
        format!("{}:{}", attr.name, attr.levels)
    } else {
        format!("{}:{}:nominal", attr.name, attr.levels)
    }
}

fn parse_field<T: std::str::FromStr>(value: &str, line: u64, column: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::Csv(format!(
            "line {line}: column `{column}` value `{value}` is not a nonnegative integer"
        ))
    })
}

/// Builds the schema for `headers`, using `given` when supplied (names and
/// order must match) and otherwise the header level counts or inferred ones.
fn resolve_schema(
    headers: &[HeaderAttr],
    max_codes: &[Option<u32>],
    given: Option<Arc<TableSchema>>,
) -> Result<Arc<TableSchema>> {
    if let Some(schema) = given {
        let names: Vec<&str> = schema
            .attributes()
            .iter()
            .map(|a| a.name.as_str())
            .collect();
        let found: Vec<&str> = headers.iter().map(|h| h.name.as_str()).collect();
        if names != found {
            return Err(Error::Schema(format!(
                "columns {found:?} do not match schema attributes {names:?}"
            )));
        }
        for (h, a) in headers.iter().zip(schema.attributes()) {
            if h.levels.is_some_and(|l| l != a.levels) {
                return Err(Error::Schema(format!(
                    "column `{}` declares {} levels, schema has {}",
                    h.name,
                    h.levels.unwrap_or_default(),
                    a.levels
                )));
            }
        }
        return Ok(schema);
    }
    let attrs = headers
        .iter()
        .zip(max_codes)
        .map(|(h, max)| Attribute {
            name: h.name.clone(),
            levels: h.levels.unwrap_or(max.map_or(1, |m| m + 1)),
            ordinal: h.ordinal,
        })
        .collect();
    Ok(Arc::new(TableSchema::new(attrs)?))
}

/// Reads a frequency table.
pub fn read_table<R: Read>(reader: R, schema: Option<Arc<TableSchema>>) -> Result<FreqTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let raw_headers = rdr.headers()?.clone();
    let count_pos = raw_headers
        .iter()
        .position(|h| h == COUNT_COLUMN)
        .ok_or_else(|| Error::Csv(format!("table has no `{COUNT_COLUMN}` column")))?;
    if count_pos + 1 != raw_headers.len() {
        return Err(Error::Csv(format!(
            "`{COUNT_COLUMN}` must be the last column"
        )));
    }
    let headers = raw_headers
        .iter()
        .take(count_pos)
        .map(parse_header)
        .collect::<Result<Vec<_>>>()?;
    if headers.is_empty() {
        return Err(Error::Csv("table has no attribute columns".into()));
    }

    let mut rows = Vec::new();
    let mut max_codes = vec![None::<u32>; headers.len()];
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut coords = Vec::with_capacity(headers.len());
        for (i, h) in headers.iter().enumerate() {
            let v: u32 = parse_field(&record[i], line, &h.name)?;
            max_codes[i] = Some(max_codes[i].map_or(v, |m| m.max(v)));
            coords.push(v);
        }
        let count: u64 = parse_field(&record[count_pos], line, COUNT_COLUMN)?;
        rows.push((CellKey::new(coords), count));
    }
    let schema = resolve_schema(&headers, &max_codes, schema)?;
    FreqTable::from_counts(schema, rows)
}

pub fn write_table<W: Write>(table: &FreqTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = table
        .schema()
        .attributes()
        .iter()
        .map(header_cell)
        .collect();
    header.push(COUNT_COLUMN.into());
    wtr.write_record(&header)?;
    for (key, count) in table.iter() {
        let mut row: Vec<String> = key.coords().iter().map(u32::to_string).collect();
        row.push(count.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn table_to_bytes(table: &FreqTable) -> Vec<u8> {
    let mut buf = Vec::new();
    write_table(table, &mut buf).expect("writing to memory");
    buf
}

pub fn read_table_path(path: &Path, schema: Option<Arc<TableSchema>>) -> Result<FreqTable> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    read_table(std::io::BufReader::new(file), schema)
}

pub fn write_table_path(table: &FreqTable, path: &Path) -> Result<()> {
    write_atomic(path, &table_to_bytes(table))
}

/// Writes via a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads integer-coded microdata. Columns named in `auxiliary` are kept as
/// auxiliary attributes; all others form the table schema.
pub fn read_microdata<R: Read>(
    reader: R,
    auxiliary: &[String],
    schema: Option<Arc<TableSchema>>,
) -> Result<Microdata> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let raw_headers = rdr.headers()?.clone();
    for name in auxiliary {
        if !raw_headers
            .iter()
            .any(|h| parse_header(h).is_ok_and(|p| &p.name == name))
        {
            return Err(Error::Csv(format!("auxiliary column `{name}` not found")));
        }
    }
    let mut attr_cols = Vec::new();
    let mut aux_cols = Vec::new();
    for (i, h) in raw_headers.iter().enumerate() {
        let parsed = parse_header(h)?;
        if auxiliary.contains(&parsed.name) {
            aux_cols.push((i, parsed.name));
        } else {
            attr_cols.push((i, parsed));
        }
    }
    if attr_cols.is_empty() {
        return Err(Error::Csv("microdata has no attribute columns".into()));
    }

    let mut records = Vec::new();
    let mut aux: BTreeMap<String, Vec<u32>> = aux_cols
        .iter()
        .map(|(_, n)| (n.clone(), Vec::new()))
        .collect();
    let mut max_codes = vec![None::<u32>; attr_cols.len()];
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(attr_cols.len());
        for (j, (i, h)) in attr_cols.iter().enumerate() {
            let v: u32 = parse_field(&record[*i], line, &h.name)?;
            max_codes[j] = Some(max_codes[j].map_or(v, |m| m.max(v)));
            row.push(v);
        }
        records.push(row);
        for (i, name) in &aux_cols {
            let v: u32 = parse_field(&record[*i], line, name)?;
            aux.get_mut(name).expect("column registered").push(v);
        }
    }
    let headers: Vec<HeaderAttr> = attr_cols.into_iter().map(|(_, h)| h).collect();
    let schema = resolve_schema(&headers, &max_codes, schema)?;
    Microdata::new(schema, records, aux)
}

/// Reads post-stratum population margins: stratum columns plus `population_count`.
pub fn read_margins<R: Read>(reader: R) -> Result<PostStrataSpec> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let count_pos = headers
        .iter()
        .position(|h| h == POPULATION_COUNT_COLUMN)
        .ok_or_else(|| {
            Error::Csv(format!(
                "margins file has no `{POPULATION_COUNT_COLUMN}` column"
            ))
        })?;
    let strata_attrs: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != count_pos)
        .map(|(i, h)| parse_header(h).map(|p| (i, p.name)))
        .collect::<Result<_>>()?;
    let mut margins = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let key = strata_attrs
            .iter()
            .map(|(i, name)| parse_field::<u32>(&record[*i], line, name))
            .collect::<Result<Vec<_>>>()?;
        let count: f64 = record[count_pos]
            .trim()
            .parse()
            .map_err(|_| Error::Csv(format!("line {line}: population_count is not a number")))?;
        if margins.insert(key.clone(), count).is_some() {
            return Err(Error::Csv(format!("line {line}: stratum {key:?} repeated")));
        }
    }
    Ok(PostStrataSpec {
        strata_attrs: strata_attrs.into_iter().map(|(_, n)| n).collect(),
        population_margins: margins,
    })
}
