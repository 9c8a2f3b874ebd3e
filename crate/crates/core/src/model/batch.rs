use crate::error::{Error, Result};
use crate::special::PAD;

/// A batch of id sequences right-padded to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSeqs {
    ids: Vec<u32>,
    lens: Vec<usize>,
    width: usize,
}

impl PaddedSeqs {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Batch("no sequences".into()));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lens.contains(&0) {
            return Err(Error::Batch("empty sequence".into()));
        }
        let width = *lens.iter().max().unwrap();
        let mut ids = vec![PAD; seqs.len() * width];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * width..][..s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(PaddedSeqs { ids, lens, width })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// Flat `[batch * width]` ids, pads included.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn seq(&self, b: usize) -> &[u32] {
        &self.ids[b * self.width..][..self.lens[b]]
    }

    /// `true` at real tokens, `false` at pads, in `ids()` order.
    pub fn valid(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i % self.width < self.lens[i / self.width]).collect()
    }

    pub fn pad_count(&self) -> usize {
        self.ids.len() - self.lens.iter().sum::<usize>()
    }

    /// Teacher-forcing split of full targets `bos … eos`: decoder inputs are
    /// every token but the last, labels every token but the first (pad
    /// where the input is pad).
    pub fn decoder_io(&self) -> Result<(PaddedSeqs, Vec<u32>)> {
        if self.lens.iter().any(|&n| n < 2) {
            return Err(Error::Contract("target needs at least begin and end tokens".into()));
        }
        let w = self.width - 1;
        let inputs: Vec<&[u32]> = (0..self.batch()).map(|b| &self.seq(b)[..self.lens[b] - 1]).collect();
        let inputs = PaddedSeqs::new(&inputs)?;
        let mut labels = vec![PAD; self.batch() * w];
        for b in 0..self.batch() {
            labels[b * w..][..self.lens[b] - 1].copy_from_slice(&self.seq(b)[1..]);
        }
        Ok((inputs, labels))
    }
}

/// K padded source matrices over the same batch of examples; source `k`
/// (0-based here) carries segment index `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub sources: Vec<PaddedSeqs>,
}

impl SourceBatch {
    pub fn new(sources: Vec<PaddedSeqs>) -> Result<Self> {
        let first = sources.first().ok_or_else(|| Error::Batch("no sources".into()))?;
        if sources.iter().any(|s| s.batch() != first.batch()) {
            return Err(Error::Batch("sources disagree on batch size".into()));
        }
        Ok(SourceBatch { sources })
    }

    /// Builds from per-example source lists, `examples[b][k]`.
    pub fn from_examples<S: AsRef<[u32]>>(examples: &[Vec<S>]) -> Result<Self> {
        let k = examples.first().map_or(0, Vec::len);
        if k == 0 || examples.iter().any(|e| e.len() != k) {
            return Err(Error::Batch("examples must all have the same positive number of sources".into()));
        }
        let sources = (0..k)
            .map(|j| PaddedSeqs::new(&examples.iter().map(|e| e[j].as_ref()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Self::new(sources)
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn batch(&self) -> usize {
        self.sources[0].batch()
    }

    pub fn layout(&self) -> SourceLayout {
        let widths: Vec<usize> = self.sources.iter().map(PaddedSeqs::width).collect();
        let mut offsets = Vec::with_capacity(widths.len());
        let mut total = 0;
        for &w in &widths {
            offsets.push(total);
            total += w;
        }
        SourceLayout {
            batch: self.batch(),
            widths,
            offsets,
            total,
            valid: self.sources.iter().map(PaddedSeqs::valid).collect(),
        }
    }
}

/// Row geometry shared by every stage of the encoder. In the concatenated
/// layout item `b` occupies rows `b * total ..`, with source `k` starting at
/// `offsets[k]`; in the split layout source `k` is its own `[batch * widths[k]]`
/// matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceLayout {
    pub batch: usize,
    pub widths: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total: usize,
    /// Per source, `[batch * widths[k]]` real-token flags.
    pub valid: Vec<Vec<bool>>,
}

impl SourceLayout {
    pub fn num_sources(&self) -> usize {
        self.widths.len()
    }

    /// Real-token flags in the concatenated layout.
    pub fn concat_valid(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch * self.total);
        for b in 0..self.batch {
            for (k, &w) in self.widths.iter().enumerate() {
                out.extend_from_slice(&self.valid[k][b * w..][..w]);
            }
        }
        out
    }

    /// Source index of column `j` of the concatenated layout.
    pub fn source_of(&self, j: usize) -> usize {
        self.offsets.iter().rposition(|&o| o <= j).unwrap()
    }

    /// Layout describing items `map[n]` of this batch as a new batch.
    pub fn select(&self, map: &[usize]) -> SourceLayout {
        let valid = self
            .widths
            .iter()
            .zip(&self.valid)
            .map(|(&w, v)| map.iter().flat_map(|&b| v[b * w..][..w].iter().copied()).collect())
            .collect();
        SourceLayout { batch: map.len(), valid, ..self.clone() }
    }
}
