//! Exposure/click/pay events and their line-delimited JSON log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Natural,
    Boost,
}

/// One exposure of one item to one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub slot: u32,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub channel: Channel,
    pub clicked: bool,
    pub paid: bool,
    pub gmv_value: f64,
    pub bid: Option<f64>,
    pub price: Option<f64>,
    pub stage_at_event: Option<u8>,
}

impl EventRecord {
    /// Checks the record-level invariants.
    ///
    /// `bid`/`price` may be absent on boost events when bidding is switched
    /// off; they must never appear on natural events.
    pub fn validate(&self) -> Result<()> {
        if self.paid && !self.clicked {
            return Err(Error::Event(format!("{}: paid without click", self.item_id)));
        }
        if !(self.gmv_value >= 0.0) || (self.gmv_value > 0.0) != self.paid {
            return Err(Error::Event(format!(
                "{}: gmv {} inconsistent with paid={}",
                self.item_id, self.gmv_value, self.paid
            )));
        }
        match self.channel {
            Channel::Natural => {
                if self.bid.is_some() || self.price.is_some() || self.stage_at_event.is_some() {
                    return Err(Error::Event(format!("{}: natural event carries boost fields", self.item_id)));
                }
            }
            Channel::Boost => {
                if self.stage_at_event.is_none() {
                    return Err(Error::Event(format!("{}: boost event without stage", self.item_id)));
                }
                if self.bid.is_some() != self.price.is_some() {
                    return Err(Error::Event(format!("{}: bid without price", self.item_id)));
                }
            }
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(out: W, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_jsonl(File::create(path)?, records)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Serde(format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn natural(clicked: bool, paid: bool, gmv: f64) -> EventRecord {
        EventRecord {
            slot: 3,
            user_id: UserId(1),
            item_id: ItemId(2),
            channel: Channel::Natural,
            clicked,
            paid,
            gmv_value: gmv,
            bid: None,
            price: None,
            stage_at_event: None,
        }
    }

    #[test]
    fn paid_requires_click() {
        assert!(natural(true, true, 12.0).validate().is_ok());
        assert!(natural(false, true, 12.0).validate().is_err());
    }

    #[test]
    fn gmv_iff_paid() {
        assert!(natural(true, false, 0.0).validate().is_ok());
        assert!(natural(true, false, 3.0).validate().is_err());
        assert!(natural(true, true, 0.0).validate().is_err());
    }

    #[test]
    fn boost_fields_only_on_boost() {
        let mut e = natural(false, false, 0.0);
        e.bid = Some(0.2);
        assert!(e.validate().is_err());
        e.channel = Channel::Boost;
        e.price = Some(0.1);
        e.stage_at_event = Some(1);
        assert!(e.validate().is_ok());
        e.stage_at_event = None;
        assert!(e.validate().is_err());
    }

    #[test]
    fn jsonl_roundtrip_preserves_records() {
        let mut b = natural(true, true, 31.5);
        b.channel = Channel::Boost;
        b.bid = Some(0.125);
        b.price = Some(0.0625);
        b.stage_at_event = Some(2);
        let recs = vec![natural(false, false, 0.0), b];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"channel\":\"boost\""));
        let back: Vec<EventRecord> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, recs);
    }
}
