use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::example::{Example, ExampleKind, Labels, IGNORE_LABEL};
use crate::tokenizer::{SpecialIds, TokenId};

/// Selection and replacement probabilities of the masked-LM corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
    /// Select one eligible position when sampling selected none.
    pub force_one: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
            force_one: true,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, p) in [
            ("select_prob", self.select_prob),
            ("mask_prob", self.mask_prob),
            ("random_prob", self.random_prob),
            ("keep_prob", self.keep_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("masking.{name} = {p} is not a probability"));
            }
        }
        let sum = self.mask_prob + self.random_prob + self.keep_prob;
        if (sum - 1.0).abs() > 1e-9 {
            errs.push(format!("masking mask/random/keep probabilities sum to {sum}, not 1"));
        }
        errs
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskingError {
    #[error("example has no maskable positions")]
    NoEligiblePositions,
    #[error("masking applies to pretraining examples, got {0:?}")]
    WrongKind(ExampleKind),
}

/// What happened to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Corrupts a pretraining example. Returns the corrupted example (with
/// `Labels::Mlm` set) and the action taken at each selected position.
pub fn apply_masking<R: Rng + ?Sized>(
    ex: &Example,
    policy: &MaskingPolicy,
    specials: &SpecialIds,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Example, Vec<(usize, MaskAction)>), MaskingError> {
    if ex.kind != ExampleKind::Pretrain {
        return Err(MaskingError::WrongKind(ex.kind));
    }
    let eligible: Vec<usize> = (0..ex.active_len())
        .filter(|&i| !specials.contains(ex.ids[i]))
        .collect();
    if eligible.is_empty() {
        return Err(MaskingError::NoEligiblePositions);
    }
    let mut selected: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < policy.select_prob)
        .collect();
    if selected.is_empty() && policy.force_one {
        selected.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut out = ex.clone();
    let mut labels = vec![IGNORE_LABEL; ex.max_len()];
    let mut actions = Vec::with_capacity(selected.len());
    for &pos in &selected {
        labels[pos] = ex.ids[pos] as i32;
        let r: f64 = rng.random();
        let action = if r < policy.mask_prob {
            out.ids[pos] = specials.mask;
            MaskAction::Mask
        } else if r < policy.mask_prob + policy.random_prob {
            out.ids[pos] = random_word(specials, vocab_size, rng);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push((pos, action));
    }
    out.labels = Labels::Mlm(labels);
    Ok((out, actions))
}

/// Uniform over the non-special ids.
fn random_word<R: Rng + ?Sized>(specials: &SpecialIds, vocab_size: usize, rng: &mut R) -> TokenId {
    loop {
        let id = rng.random_range(0..vocab_size) as TokenId;
        if !specials.contains(id) {
            return id;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::Packer;
    use crate::segmenter::{IndexedToken, SegmentCaps};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SP: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
    };

    fn doc(n: usize) -> Example {
        let toks: Vec<_> = (0..n)
            .map(|i| IndexedToken {
                id: 5 + (i % 20) as u32,
                p: 0,
                s: 0,
                t: i as u16,
            })
            .collect();
        Packer::new(SP, SegmentCaps::default(), n + 4).pack_pretraining(&toks).remove(0)
    }

    #[test]
    fn zero_select_without_forcing_labels_nothing() {
        let policy = MaskingPolicy {
            select_prob: 0.0,
            force_one: false,
            ..MaskingPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ex, actions) = apply_masking(&doc(10), &policy, &SP, 30, &mut rng).unwrap();
        assert!(actions.is_empty());
        match ex.labels {
            Labels::Mlm(l) => assert!(l.iter().all(|&x| x == IGNORE_LABEL)),
            _ => panic!(),
        }
    }

    #[test]
    fn forcing_selects_one() {
        let policy = MaskingPolicy {
            select_prob: 0.0,
            ..MaskingPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, actions) = apply_masking(&doc(10), &policy, &SP, 30, &mut rng).unwrap();
        assert_eq!(actions.len(), 1);
    }

    #[test]
    fn only_specials_is_an_error() {
        let ex = Packer::new(SP, SegmentCaps::default(), 4)
            .pack_pretraining(&[IndexedToken { id: SP.unk, p: 0, s: 0, t: 0 }])
            .remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            apply_masking(&ex, &MaskingPolicy::default(), &SP, 30, &mut rng).unwrap_err(),
            MaskingError::NoEligiblePositions
        );
    }

    #[test]
    fn labels_hold_originals() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = doc(40);
        let (ex, actions) = apply_masking(&base, &MaskingPolicy::default(), &SP, 30, &mut rng).unwrap();
        let Labels::Mlm(labels) = &ex.labels else { panic!() };
        for (pos, action) in actions {
            assert_eq!(labels[pos], base.ids[pos] as i32);
            match action {
                MaskAction::Mask => assert_eq!(ex.ids[pos], SP.mask),
                MaskAction::Keep => assert_eq!(ex.ids[pos], base.ids[pos]),
                MaskAction::Random => assert!(!SP.contains(ex.ids[pos])),
            }
        }
    }

    #[test]
    fn default_policy_is_valid() {
        assert!(MaskingPolicy::default().validate().is_empty());
        let bad = MaskingPolicy {
            keep_prob: 0.3,
            ..MaskingPolicy::default()
        };
        assert_eq!(bad.validate().len(), 1);
    }
}
