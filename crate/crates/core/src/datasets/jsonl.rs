//! JSON Lines persistence. Line 1 is a `{"m", "p", "R"}` header; each
//! further line is one query group.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, FunnelLabels, InteractionRecord, Platform, QueryGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataHeader {
    pub m: usize,
    pub p: usize,
    #[serde(rename = "R")]
    pub regions: usize,
}

impl DataHeader {
    /// Region one-hot columns: the last `R` entries of `x_user`.
    pub fn country_idx(&self) -> Vec<usize> {
        (self.m - self.regions..self.m).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.m + self.p
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCandidate {
    listing_region: u32,
    x_user: Vec<f64>,
    x_listing: Vec<f64>,
    click: u8,
    cart: u8,
    purchase: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGroup {
    query_id: String,
    region: u32,
    platform: Platform,
    candidates: Vec<WireCandidate>,
}

fn to_wire(g: &QueryGroup) -> WireGroup {
    WireGroup {
        query_id: g.query_id.clone(),
        region: g.region,
        platform: g.platform,
        candidates: g
            .records
            .iter()
            .map(|r| WireCandidate {
                listing_region: r.listing_region,
                x_user: r.x_user.clone(),
                x_listing: r.x_listing.clone(),
                click: r.labels.click().into(),
                cart: r.labels.cart().into(),
                purchase: r.labels.purchase().into(),
            })
            .collect(),
    }
}

fn flag(v: u8, line: usize, field: &str) -> Result<bool, DataError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(DataError::Malformed {
            line,
            message: format!("{field} must be 0 or 1, got {v}"),
        }),
    }
}

fn from_wire(w: WireGroup, header: &DataHeader, line: usize) -> Result<QueryGroup, DataError> {
    let mut records = Vec::with_capacity(w.candidates.len());
    for (i, c) in w.candidates.into_iter().enumerate() {
        let labels = FunnelLabels::new(
            flag(c.click, line, "click")?,
            flag(c.cart, line, "cart")?,
            flag(c.purchase, line, "purchase")?,
        )
        .ok_or_else(|| DataError::FunnelViolation {
            line,
            query_id: w.query_id.clone(),
            candidate: i,
        })?;
        if c.x_user.len() != header.m || c.x_listing.len() != header.p {
            return Err(DataError::Malformed {
                line,
                message: format!(
                    "candidate {i}: feature lengths ({}, {}) do not match header ({}, {})",
                    c.x_user.len(),
                    c.x_listing.len(),
                    header.m,
                    header.p
                ),
            });
        }
        if c.listing_region as usize >= header.regions {
            return Err(DataError::Malformed {
                line,
                message: format!("candidate {i}: listing_region {} out of range", c.listing_region),
            });
        }
        records.push(InteractionRecord {
            query_id: w.query_id.clone(),
            region: w.region,
            platform: w.platform,
            listing_region: c.listing_region,
            x_user: c.x_user,
            x_listing: c.x_listing,
            labels,
        });
    }
    if w.region as usize >= header.regions {
        return Err(DataError::Malformed {
            line,
            message: format!("region {} out of range", w.region),
        });
    }
    QueryGroup::new(w.query_id, w.region, w.platform, records).map_err(|e| DataError::Malformed {
        line,
        message: e.to_string(),
    })
}

pub fn write_jsonl_to<W: Write>(
    mut out: W,
    header: &DataHeader,
    groups: &[QueryGroup],
) -> Result<(), DataError> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for g in groups {
        serde_json::to_writer(&mut out, &to_wire(g))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `groups` to `path`. Floats use the shortest decimal form that
/// parses back to the same bits.
pub fn write_jsonl(path: &Path, header: &DataHeader, groups: &[QueryGroup]) -> Result<(), DataError> {
    let f = File::create(path)?;
    write_jsonl_to(BufWriter::new(f), header, groups)
}

pub fn read_jsonl_from<R: BufRead>(input: R) -> Result<(DataHeader, Vec<QueryGroup>), DataError> {
    let mut lines = input.lines();
    let header: DataHeader = match lines.next() {
        None => return Err(DataError::MissingHeader),
        Some(l) => serde_json::from_str(&l?).map_err(|e| DataError::Malformed {
            line: 1,
            message: format!("header: {e}"),
        })?,
    };
    if header.regions == 0 || header.regions > header.m {
        return Err(DataError::Malformed {
            line: 1,
            message: format!("header declares R = {} with m = {}", header.regions, header.m),
        });
    }
    let mut groups = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let w: WireGroup = serde_json::from_str(&l).map_err(|e| DataError::Malformed {
            line,
            message: e.to_string(),
        })?;
        groups.push(from_wire(w, &header, line)?);
    }
    Ok((header, groups))
}

pub fn read_jsonl(path: &Path) -> Result<(DataHeader, Vec<QueryGroup>), DataError> {
    read_jsonl_from(BufReader::new(File::open(path)?))
}
