use std::collections::BTreeMap;

/// Counts of raw-sequence reads, keyed by (block being trained, block the
/// sequence belongs to).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessAudit {
    pub reads: BTreeMap<(usize, usize), usize>,
}

impl AccessAudit {
    pub fn record(&mut self, training: usize, data: usize, n: usize) {
        *self.reads.entry((training, data)).or_insert(0) += n;
    }

    /// Reads of blocks older than the one being trained.
    pub fn historical_reads(&self) -> usize {
        self.reads
            .iter()
            .filter(|((t, d), _)| d < t)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn reads_during(&self, training: usize) -> usize {
        self.reads
            .iter()
            .filter(|((t, _), _)| *t == training)
            .map(|(_, n)| n)
            .sum()
    }
}
