//! Inference runtime: a trained model plus its vocabulary and label set,
//! decoding character sequences to BIO labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LabelSet, Vocabulary};
use crate::crf::{bio_constraint_mask, viterbi_decode, TransitionModel};
use crate::error::{Error, Result};
use crate::nn::{sentence_forward, ForwardOpts, ModelParams};

/// A self-contained tagging model. Decoding applies the hard BIO
/// transition mask when the model was trained with constraints enabled.
#[derive(Debug, Clone)]
pub struct Tagger {
    params: ModelParams,
    vocab: Vocabulary,
    label_set: LabelSet,
    hard_bio: bool,
    tanh_projection: bool,
    decode_trans: TransitionModel,
}

impl Tagger {
    pub fn new(
        params: ModelParams,
        vocab: Vocabulary,
        label_set: LabelSet,
        hard_bio: bool,
        tanh_projection: bool,
    ) -> Result<Self> {
        params.check()?;
        params.assert_finite()?;
        if params.num_tags() != label_set.len() {
            return Err(Error::LabelSetMismatch(format!(
                "model has {} tags but the label set has {}",
                params.num_tags(),
                label_set.len()
            )));
        }
        if params.vocab_size() != vocab.len() {
            return Err(Error::ModelFormat(format!(
                "embedding has {} rows but the vocabulary has {} entries",
                params.vocab_size(),
                vocab.len()
            )));
        }
        let mut decode_trans = params.transitions.clone();
        if hard_bio {
            decode_trans.apply_mask(&bio_constraint_mask(&label_set)?)?;
        }
        Ok(Self {
            params,
            vocab,
            label_set,
            hard_bio,
            tanh_projection,
            decode_trans,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn hard_bio(&self) -> bool {
        self.hard_bio
    }

    pub fn tanh_projection(&self) -> bool {
        self.tanh_projection
    }

    /// Predicts one BIO label per character. Unknown characters map to the
    /// UNK embedding; the sentence is processed at its full length.
    pub fn tag_chars(&self, chars: &[char]) -> Result<Vec<String>> {
        let ids: Vec<usize> = chars.iter().map(|&c| self.vocab.id_of(c)).collect();
        let tags = self.decode_ids(&ids)?;
        Ok(tags
            .into_iter()
            .map(|t| self.label_set.label(t).to_owned())
            .collect())
    }

    /// Viterbi decode over already-encoded character ids.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let opts = ForwardOpts {
            dropout: 0.0,
            training: false,
            tanh_projection: self.tanh_projection,
        };
        // inference consumes no randomness; any rng satisfies the signature
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = sentence_forward(&self.params, ids, &opts, &mut rng)?;
        let best = viterbi_decode(&cache.emissions, &self.decode_trans)?;
        Ok(best.tags)
    }
}
