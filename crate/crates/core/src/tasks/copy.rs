//! Copy task for the causal host: a random prefix of length `p`, a
//! delimiter, then the prefix again. With `seq_len = 2p` the model sees
//! `prefix, delimiter, prefix[..p-1]` and must predict `prefix` at the
//! positions from the delimiter on.
//!
//! Record layout: `p × u16` prefix symbols.

use rand::Rng;

use crate::config::TaskConfig;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;

use super::{sample_rng, Dataset, Example, Split, Target};

pub fn sample(vocab: usize, seq_len: usize, seed: u64, split: Split, index: usize) -> Vec<usize> {
    let mut rng = sample_rng(seed, split, index as u64);
    (0..seq_len / 2).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Model input and per-position targets for a prefix; the delimiter is
/// symbol `vocab`.
pub fn sequence(prefix: &[usize], vocab: usize) -> (Vec<usize>, Vec<Option<usize>>) {
    let p = prefix.len();
    let mut input = prefix.to_vec();
    input.push(vocab);
    input.extend_from_slice(&prefix[..p.saturating_sub(1)]);
    let mut targets = vec![None; p];
    targets.extend(prefix.iter().map(|&s| Some(s)));
    (input, targets)
}

pub fn generate(task: &TaskConfig, split: Split, n: usize) -> Result<Dataset> {
    if task.seq_len < 2 || task.seq_len % 2 != 0 {
        return Err(Error::config(format!("copy seq_len must be even and >= 2, got {}", task.seq_len)));
    }
    if task.vocab == 0 || task.vocab >= u16::MAX as usize {
        return Err(Error::config(format!("copy vocab {} out of range", task.vocab)));
    }
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    let records = map_indexed(n, |i| {
        sample(task.vocab, task.seq_len, task.seed, split, i)
            .iter()
            .flat_map(|&s| (s as u16).to_le_bytes())
            .collect::<Vec<u8>>()
    });
    Ok(Dataset::from_records(task, split, task.seq_len, records))
}

pub fn decode(record: &[u8]) -> Vec<usize> {
    record
        .chunks(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect()
}

pub(crate) fn example<'a>(task: &TaskConfig, record: &'a [u8]) -> Example<'a> {
    let (input, targets) = sequence(&decode(record), task.vocab);
    Example {
        pixels: None,
        question: None,
        tokens: Some(input),
        target: Target::Sequence(targets),
        relational: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_is_copied_after_delimiter() {
        let (input, targets) = sequence(&[0, 1, 2], 3);
        assert_eq!(input, vec![0, 1, 2, 3, 0, 1]);
        assert_eq!(targets, vec![None, None, None, Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn odd_length_rejected() {
        let task = TaskConfig {
            kind: crate::config::TaskKind::Copy,
            seq_len: 7,
            ..Default::default()
        };
        assert!(generate(&task, Split::Train, 3).is_err());
    }
}
