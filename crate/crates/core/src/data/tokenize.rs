//! Fixed-vocabulary tokenizer with `[CLS]`/`[SEP]` framing.

use crate::error::{invalid, Result};
pub use crate::model::EncodedText;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
/// Raw content id `t` maps to `t + NUM_SPECIAL`.
pub const NUM_SPECIAL: u32 = 4;

/// `[CLS] content [SEP]` padded to `max_len`, truncating content to
/// `max_len - 2`. Ids beyond `vocab_size` become `[UNK]`.
pub fn tokenize(content: &[u32], max_len: usize, vocab_size: usize) -> Result<EncodedText> {
    if max_len < 2 {
        return invalid("max_len must be at least 2");
    }
    if vocab_size <= NUM_SPECIAL as usize {
        return invalid(format!("vocabulary of {vocab_size} leaves no room beyond special tokens"));
    }
    let keep = content.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(content[..keep].iter().map(|&t| {
        let id = t.saturating_add(NUM_SPECIAL);
        if (id as usize) < vocab_size {
            id
        } else {
            UNK
        }
    }));
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![true; real];
    mask.resize(max_len, false);
    Ok(EncodedText { ids, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_content() {
        let e = tokenize(&[], 6, 100).unwrap();
        assert_eq!(e.ids, vec![CLS, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(e.mask, vec![true, true, false, false, false, false]);
    }

    #[test]
    fn exact_fit() {
        let e = tokenize(&[5, 6, 7], 5, 100).unwrap();
        assert_eq!(e.ids, vec![CLS, 9, 10, 11, SEP]);
        assert!(e.mask.iter().all(|&m| m));
    }

    #[test]
    fn truncates_to_510() {
        let content: Vec<u32> = (0..600).collect();
        let e = tokenize(&content, 512, 30522).unwrap();
        assert_eq!(e.ids.len(), 512);
        assert_eq!(e.ids[0], CLS);
        assert_eq!(e.ids[511], SEP);
        assert_eq!(e.ids[510], 509 + NUM_SPECIAL);
    }

    #[test]
    fn unknown_ids() {
        let e = tokenize(&[0, 200], 4, 10).unwrap();
        assert_eq!(e.ids, vec![CLS, 4, UNK, SEP]);
        assert!(tokenize(&[], 1, 10).is_err());
    }
}
