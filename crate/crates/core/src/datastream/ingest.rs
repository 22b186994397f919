use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
}

/// Parsed log with dense ids and the raw identifiers they replace.
#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub interactions: Vec<Interaction>,
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
}

pub fn ingest_csv(path: &Path) -> Result<Ingested> {
    let text = std::fs::read_to_string(path)?;
    ingest_str(&text)
}

/// Parses `user,item,timestamp` lines. A first line whose timestamp field is
/// not an integer is taken as a header. Ids are remapped densely in order of
/// first appearance by time (file order breaks ties), so item ids seen in
/// earlier periods are smaller. The result is stably sorted by
/// (user, timestamp).
pub fn ingest_str(text: &str) -> Result<Ingested> {
    let mut raw: Vec<(&str, &str, u64)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: n + 1,
                detail: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let ts = match fields[2].parse::<u64>() {
            Ok(ts) => ts,
            Err(_) if n == 0 && raw.is_empty() => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line: n + 1,
                    detail: format!("timestamp {:?} is not a non-negative integer", fields[2]),
                })
            }
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                detail: "empty id".into(),
            });
        }
        raw.push((fields[0], fields[1], ts));
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("no interactions".into()));
    }

    let mut by_time: Vec<usize> = (0..raw.len()).collect();
    by_time.sort_by_key(|&i| raw[i].2);
    let mut users: HashMap<&str, usize> = HashMap::new();
    let mut items: HashMap<&str, usize> = HashMap::new();
    let mut out = Ingested::default();
    for &i in &by_time {
        let (u, it, _) = raw[i];
        users.entry(u).or_insert_with(|| {
            out.user_names.push(u.to_string());
            out.user_names.len() - 1
        });
        items.entry(it).or_insert_with(|| {
            out.item_names.push(it.to_string());
            out.item_names.len() - 1
        });
    }
    out.interactions = raw
        .iter()
        .map(|&(u, it, ts)| Interaction {
            user: users[u],
            item: items[it],
            timestamp: ts,
        })
        .collect();
    out.interactions.sort_by_key(|x| (x.user, x.timestamp));
    Ok(out)
}
