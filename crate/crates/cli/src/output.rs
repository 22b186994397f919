use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use streamrec::evalkit::{BenchRecord, MetricsReport};

use crate::commands::Failure;

/// Line-delimited JSON records.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path, append: bool) -> Result<Self, Failure> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), Failure> {
        let line = serde_json::to_string(record).map_err(|e| Failure::runtime(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Failure::runtime(e.to_string()))?;
        self.out.flush().map_err(|e| Failure::runtime(e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_sha256: String,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
    pub config: serde_json::Value,
}

impl<'a> RunManifest<'a> {
    pub fn new<C: Serialize>(command: &'a str, config: &C, seed: Option<u64>) -> Result<Self, Failure> {
        let value = serde_json::to_value(config).map_err(|e| Failure::runtime(e.to_string()))?;
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: sha256_hex(value.to_string().as_bytes()),
            seed,
            resumed_from: None,
            config: value,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        write_file(
            &dir.join("run.json"),
            serde_json::to_string_pretty(self).map_err(|e| Failure::runtime(e.to_string()))?,
        )
    }
}

pub fn write_file(path: &Path, text: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v}"))
}

/// One row per report, with Recall and NDCG columns for every cutoff.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let ks: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.recall.keys().copied().collect())
        .unwrap_or_default();
    let mut s = String::from("run,block,k,n_users");
    for k in &ks {
        s += &format!(",recall@{k},ndcg@{k}");
    }
    s += ",ra,la,hmean,new_users,new_recall\n";
    for (run, r) in rows {
        s += &format!("{run},{},{},{}", r.block, r.k, r.n_users);
        for k in &ks {
            s += &format!(",{},{}", r.recall[k], r.ndcg[k]);
        }
        s += &format!(
            ",{},{},{},{},{}\n",
            opt(r.ra),
            r.la,
            r.hmean,
            r.new_users.n_users,
            r.new_users.recall
        );
    }
    s
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("mechanism,n,infer_secs,train_secs,peak_bytes\n");
    for r in records {
        s += &format!(
            "{},{},{},{},{}\n",
            r.mechanism.as_str(),
            r.n,
            r.infer_secs,
            opt(r.train_secs),
            r.peak_bytes
        );
    }
    s
}
