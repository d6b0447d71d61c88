use std::cmp::Ordering;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feedback type of a logged interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Click,
    Purchase,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Click => "click",
            Behavior::Purchase => "purchase",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Behavior::Click => 0,
            Behavior::Purchase => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Behavior::Click),
            1 => Some(Behavior::Purchase),
            _ => None,
        }
    }
}

/// One row of a raw interaction log. `item_id` is the raw catalog id; dense
/// ids are assigned when the dataset is split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionEvent {
    pub session_id: String,
    pub timestamp: i64,
    pub item_id: u64,
    pub behavior: Behavior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeaderMode {
    Present,
    Absent,
    /// Treat the first row as a header when its timestamp column is not an integer.
    Auto,
}

/// Zero-based column positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Columns {
    pub session: usize,
    pub timestamp: usize,
    pub item: usize,
    pub behavior: usize,
}

/// How to read a delimiter-separated interaction log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub delimiter: char,
    pub header: HeaderMode,
    pub columns: Columns,
    /// Behavior token mapping; `None` drops the row.
    pub behaviors: Vec<(String, Option<Behavior>)>,
}

impl FormatSpec {
    /// `session_id,timestamp,item_id,behavior` with `click`/`purchase` tokens.
    pub fn standard() -> Self {
        FormatSpec {
            delimiter: ',',
            header: HeaderMode::Auto,
            columns: Columns {
                session: 0,
                timestamp: 1,
                item: 2,
                behavior: 3,
            },
            behaviors: vec![
                ("click".into(), Some(Behavior::Click)),
                ("purchase".into(), Some(Behavior::Purchase)),
            ],
        }
    }

    /// RetailRocket `events.csv`: `timestamp,visitorid,event,itemid,transactionid`.
    /// Views are clicks, add-to-cart events are purchases, transactions are dropped.
    pub fn retailrocket() -> Self {
        FormatSpec {
            delimiter: ',',
            header: HeaderMode::Auto,
            columns: Columns {
                session: 1,
                timestamp: 0,
                item: 3,
                behavior: 2,
            },
            behaviors: vec![
                ("view".into(), Some(Behavior::Click)),
                ("addtocart".into(), Some(Behavior::Purchase)),
                ("transaction".into(), None),
            ],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Self::standard()),
            "retailrocket" => Some(Self::retailrocket()),
            _ => None,
        }
    }

    /// Parses `token=click,token=purchase,token=skip` into a behavior mapping.
    pub fn parse_mapping(spec: &str) -> Result<Vec<(String, Option<Behavior>)>> {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|pair| {
                let (tok, kind) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("mapping entry {pair:?} lacks '='")))?;
                let b = match kind.trim() {
                    "click" => Some(Behavior::Click),
                    "purchase" => Some(Behavior::Purchase),
                    "skip" => None,
                    other => return Err(Error::Config(format!("unknown behavior kind {other:?}"))),
                };
                Ok((tok.trim().to_string(), b))
            })
            .collect()
    }

    fn behavior(&self, token: &str) -> Option<Option<Behavior>> {
        self.behaviors
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, b)| *b)
    }
}

fn compare_session_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Reads events and orders them by `(session_id, timestamp)`, keeping input
/// order for equal timestamps. Numeric session ids sort numerically.
pub fn parse_events<R: BufRead>(input: R, format: &FormatSpec) -> Result<Vec<InteractionEvent>> {
    let mut events = Vec::new();
    let cols = format.columns;
    let width = cols.session.max(cols.timestamp).max(cols.item).max(cols.behavior) + 1;
    let mut first = true;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).map(str::trim).collect();
        let is_first = std::mem::replace(&mut first, false);
        if is_first {
            let skip = match format.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => fields
                    .get(cols.timestamp)
                    .is_none_or(|t| t.parse::<i64>().is_err()),
            };
            if skip {
                continue;
            }
        }
        if fields.len() < width {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least {width} fields, found {}", fields.len()),
            });
        }
        let token = fields[cols.behavior];
        let behavior = match format.behavior(token) {
            Some(Some(b)) => b,
            Some(None) => continue,
            None => {
                return Err(Error::UnknownBehavior {
                    line: line_no,
                    token: token.to_string(),
                })
            }
        };
        let timestamp = fields[cols.timestamp].parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("timestamp {:?} is not an integer", fields[cols.timestamp]),
        })?;
        let item_id = fields[cols.item].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("item id {:?} is not a non-negative integer", fields[cols.item]),
        })?;
        let session_id = fields[cols.session];
        if session_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty session id".into(),
            });
        }
        events.push(InteractionEvent {
            session_id: session_id.to_string(),
            timestamp,
            item_id,
            behavior,
        });
    }
    events.sort_by(|a, b| {
        compare_session_ids(&a.session_id, &b.session_id).then(a.timestamp.cmp(&b.timestamp))
    });
    Ok(events)
}

/// Writes events in the standard `session_id,timestamp,item_id,behavior` layout.
pub fn write_events<W: std::io::Write>(mut out: W, events: &[InteractionEvent]) -> std::io::Result<()> {
    writeln!(out, "session_id,timestamp,item_id,behavior")?;
    for e in events {
        writeln!(
            out,
            "{},{},{},{}",
            e.session_id,
            e.timestamp,
            e.item_id,
            e.behavior.as_str()
        )?;
    }
    Ok(())
}
