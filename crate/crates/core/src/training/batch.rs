use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainingError;

/// Source and target id sequences for one sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// A group of examples padded together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    /// Non-pad target tokens.
    pub tokens: usize,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let (src, tgt): (Vec<_>, Vec<_>) = examples.into_iter().map(|e| (e.src.clone(), e.tgt.clone())).unzip();
        let tokens = tgt.iter().map(Vec::len).sum();
        Self { src, tgt, tokens }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Padded size: rows times the longest source or target.
    pub fn padded_tokens(&self) -> usize {
        padded_cost(self.len(), self.src.iter().chain(&self.tgt).map(Vec::len).max().unwrap_or(0))
    }
}

fn padded_cost(rows: usize, longest: usize) -> usize {
    rows * longest
}

/// Groups examples of similar target length so that each batch's padded size
/// stays within `max_tokens`, then shuffles the batch order.
pub fn make_batches<R: Rng + ?Sized>(
    examples: &[Example],
    max_tokens: usize,
    rng: &mut R,
) -> Result<Vec<Batch>, TrainingError> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].tgt.len(), examples[i].src.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let e = &examples[i];
        let len = e.src.len().max(e.tgt.len());
        if len > max_tokens {
            return Err(TrainingError::Input(format!(
                "example {i} needs {len} tokens, more than max_tokens {max_tokens}"
            )));
        }
        let grown = longest.max(len);
        if !current.is_empty() && padded_cost(current.len() + 1, grown) > max_tokens {
            batches.push(Batch::from_examples(current.iter().map(|&j| &examples[j])));
            current.clear();
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(Batch::from_examples(current.iter().map(|&j| &examples[j])));
    }
    batches.shuffle(rng);
    Ok(batches)
}
