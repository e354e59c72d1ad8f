//! Multi-prompt conditioning.
//!
//! Each prompt is encoded on its own, so no prompt sees another prompt's
//! tokens, and the fixed-length encodings are stacked into one sequence of
//! `77 * n` rows. The span list records which rows belong to which prompt;
//! attention control uses it to route tokens to mask regions.

use std::ops::Range;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed token length of one encoded prompt.
pub const TOKENS_PER_PROMPT: usize = 77;

/// Role of a token position within a fixed-length encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenRole {
    Sot,
    Content,
    Eot,
    Pad,
}

impl TokenRole {
    /// Positions that carry the prompt's meaning and may be boosted.
    pub fn is_semantic(self) -> bool {
        matches!(self, TokenRole::Content | TokenRole::Eot)
    }
}

/// Role layout for a prompt with `content` content tokens (already truncated).
pub fn role_layout(content: usize) -> Vec<TokenRole> {
    assert!(content <= TOKENS_PER_PROMPT - 2);
    let mut roles = Vec::with_capacity(TOKENS_PER_PROMPT);
    roles.push(TokenRole::Sot);
    roles.extend(std::iter::repeat_n(TokenRole::Content, content));
    roles.push(TokenRole::Eot);
    roles.resize(TOKENS_PER_PROMPT, TokenRole::Pad);
    roles
}

/// Token ids and roles of one prompt, padded to [`TOKENS_PER_PROMPT`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub roles: Vec<TokenRole>,
    pub truncated: bool,
}

/// A text encoder with a fixed-length tokenizer.
pub trait TextEncoder {
    /// Embedding width `d`.
    fn width(&self) -> usize;

    fn tokenize(&self, text: &str) -> Tokenized;

    /// Encode a single prompt into a `77 x d` matrix.
    fn encode(&self, text: &str) -> Result<PromptEmbedding>;
}

fn check_roles(roles: &[TokenRole]) -> Result<()> {
    if roles.len() != TOKENS_PER_PROMPT {
        return Err(Error::invalid(format!(
            "expected {TOKENS_PER_PROMPT} roles, got {}",
            roles.len()
        )));
    }
    if roles[0] != TokenRole::Sot || roles[1..].contains(&TokenRole::Sot) {
        return Err(Error::invalid("exactly one SOT is required, at position 0"));
    }
    let eots: Vec<usize> = (0..roles.len())
        .filter(|&i| roles[i] == TokenRole::Eot)
        .collect();
    let [eot] = eots[..] else {
        return Err(Error::invalid("exactly one EOT is required"));
    };
    if roles[1..eot].iter().any(|&r| r != TokenRole::Content)
        || roles[eot + 1..].iter().any(|&r| r != TokenRole::Pad)
    {
        return Err(Error::invalid("content must precede EOT and only PAD may follow it"));
    }
    Ok(())
}

/// Encoding of a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    matrix: Array2<f64>,
    roles: Vec<TokenRole>,
    truncated: bool,
}

impl PromptEmbedding {
    pub fn new(matrix: Array2<f64>, roles: Vec<TokenRole>, truncated: bool) -> Result<Self> {
        check_roles(&roles)?;
        if matrix.nrows() != TOKENS_PER_PROMPT {
            return Err(Error::invalid(format!(
                "embedding has {} rows, expected {TOKENS_PER_PROMPT}",
                matrix.nrows()
            )));
        }
        Ok(Self {
            matrix,
            roles,
            truncated,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    /// True when the prompt was longer than the encoder accepts.
    pub fn truncated(&self) -> bool {
        self.truncated
    }
}

/// Concatenated conditioning for `n` prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedConditioning {
    matrix: Array2<f64>,
    spans: Vec<Range<usize>>,
    roles: Vec<TokenRole>,
}

impl PackedConditioning {
    /// `(77 n) x d` token matrix.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Half-open row range of each prompt, in prompt order.
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn num_prompts(&self) -> usize {
        self.spans.len()
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// 0-based prompt index owning token `pos`.
    pub fn span_of(&self, pos: usize) -> usize {
        pos / TOKENS_PER_PROMPT
    }
}

/// Encode every prompt independently.
pub fn encode_prompts<S: AsRef<str>>(
    prompts: &[S],
    encoder: &dyn TextEncoder,
) -> Result<Vec<PromptEmbedding>> {
    if prompts.is_empty() {
        return Err(Error::invalid("at least one prompt is required"));
    }
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let emb = encoder.encode(p.as_ref()).map_err(|e| match e {
                Error::Encoder { .. } => e,
                other => Error::Encoder {
                    index: i + 1,
                    message: other.to_string(),
                },
            })?;
            if emb.truncated() {
                tracing::warn!(prompt = i + 1, "prompt exceeds {TOKENS_PER_PROMPT} tokens and was truncated");
            }
            Ok(emb)
        })
        .collect()
}

/// Stack per-prompt embeddings into one `77 n`-row sequence.
pub fn concat_prompts(embeddings: &[PromptEmbedding]) -> Result<PackedConditioning> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("at least one embedding is required"))?;
    if let Some(bad) = embeddings.iter().position(|e| e.width() != first.width()) {
        return Err(Error::invalid(format!(
            "embedding {} has width {}, expected {}",
            bad + 1,
            embeddings[bad].width(),
            first.width()
        )));
    }
    let views: Vec<_> = embeddings.iter().map(|e| e.matrix.view()).collect();
    let matrix = concatenate(Axis(0), &views).expect("uniform widths checked above");
    let spans = (0..embeddings.len())
        .map(|i| i * TOKENS_PER_PROMPT..(i + 1) * TOKENS_PER_PROMPT)
        .collect();
    let roles = embeddings.iter().flat_map(|e| e.roles.iter().copied()).collect();
    Ok(PackedConditioning {
        matrix,
        spans,
        roles,
    })
}

/// Null conditioning with the same shape as `n` packed prompts.
pub fn unconditional_packing(n: usize, encoder: &dyn TextEncoder) -> Result<PackedConditioning> {
    if n == 0 {
        return Err(Error::invalid("prompt count must be at least 1"));
    }
    let empty = encoder.encode("")?;
    concat_prompts(&vec![empty; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyTextEncoder;
    use proptest::prelude::*;

    fn enc() -> ToyTextEncoder {
        ToyTextEncoder::new(7)
    }

    /// Independent tokenizer: whitespace split, SOT + words + EOT + PAD.
    fn oracle_roles(text: &str) -> Vec<TokenRole> {
        let words = text.split_whitespace().count().min(TOKENS_PER_PROMPT - 2);
        let mut r = vec![TokenRole::Sot];
        r.extend(std::iter::repeat_n(TokenRole::Content, words));
        r.push(TokenRole::Eot);
        while r.len() < TOKENS_PER_PROMPT {
            r.push(TokenRole::Pad);
        }
        r
    }

    #[test]
    fn joint_encoding_equals_solo() {
        let e = enc();
        let both = encode_prompts(&["a", "b"], &e).unwrap();
        let solo = encode_prompts(&["a"], &e).unwrap();
        assert_eq!(both[0], solo[0]);
    }

    #[test]
    fn empty_prompt_is_valid() {
        let emb = encode_prompts(&[""], &enc()).unwrap();
        assert_eq!(emb[0].roles()[0], TokenRole::Sot);
        assert_eq!(emb[0].roles()[1], TokenRole::Eot);
        assert!(emb[0].roles()[2..].iter().all(|&r| r == TokenRole::Pad));
    }

    #[test]
    fn empty_prompt_list_rejected() {
        let none: [&str; 0] = [];
        assert!(encode_prompts(&none, &enc()).is_err());
        assert!(concat_prompts(&[]).is_err());
        assert!(unconditional_packing(0, &enc()).is_err());
    }

    #[test]
    fn overlong_prompt_is_truncated_keeping_eot() {
        let long = vec!["word"; 120].join(" ");
        let emb = &encode_prompts(&[long], &enc()).unwrap()[0];
        assert!(emb.truncated());
        assert_eq!(emb.roles()[TOKENS_PER_PROMPT - 1], TokenRole::Eot);
    }

    #[test]
    fn single_prompt_packs_to_itself() {
        let emb = encode_prompts(&["make it red"], &enc()).unwrap();
        let packed = concat_prompts(&emb).unwrap();
        assert_eq!(packed.matrix(), emb[0].matrix());
        assert_eq!(packed.spans(), &[0..77]);
    }

    #[test]
    fn three_prompts_pack_to_231_rows() {
        let emb = encode_prompts(&["a", "b c", "d e f"], &enc()).unwrap();
        let packed = concat_prompts(&emb).unwrap();
        assert_eq!(packed.len(), 231);
        assert_eq!(packed.matrix().nrows(), 231);
        assert_eq!(packed.spans()[1], 77..154);
        assert_eq!(packed.span_of(153), 1);
    }

    #[test]
    fn mixed_widths_rejected() {
        let a = PromptEmbedding::new(Array2::zeros((77, 4)), role_layout(0), false).unwrap();
        let b = PromptEmbedding::new(Array2::zeros((77, 5)), role_layout(0), false).unwrap();
        assert!(concat_prompts(&[a, b]).is_err());
    }

    #[test]
    fn role_invariants_enforced() {
        let mut roles = role_layout(2);
        roles[5] = TokenRole::Content;
        assert!(PromptEmbedding::new(Array2::zeros((77, 2)), roles, false).is_err());
        assert!(PromptEmbedding::new(Array2::zeros((76, 2)), role_layout(0), false).is_err());
    }

    #[test]
    fn unconditional_copies_empty_prompt() {
        let e = enc();
        let one = unconditional_packing(1, &e).unwrap();
        assert_eq!(one.matrix(), e.encode("").unwrap().matrix());
        let two = unconditional_packing(2, &e).unwrap();
        let m = two.matrix();
        assert_eq!(m.slice(ndarray::s![0..77, ..]), m.slice(ndarray::s![77..154, ..]));
        for span in two.spans() {
            assert_eq!(two.roles()[span.start], TokenRole::Sot);
            assert_eq!(&two.roles()[span.clone()], &oracle_roles("")[..]);
        }
    }

    proptest! {
        #[test]
        fn roles_match_retokenization(words in prop::collection::vec("[a-z]{1,6}", 0..90)) {
            let text = words.join(" ");
            let emb = enc().encode(&text).unwrap();
            prop_assert_eq!(emb.roles(), &oracle_roles(&text)[..]);
        }

        #[test]
        fn packing_laws(prompts in prop::collection::vec("[a-z ]{0,30}", 1..6)) {
            let e = enc();
            let emb = encode_prompts(&prompts, &e).unwrap();
            let packed = concat_prompts(&emb).unwrap();
            let n = prompts.len();
            prop_assert_eq!(packed.len(), 77 * n);
            prop_assert_eq!(packed.roles().iter().filter(|&&r| r == TokenRole::Sot).count(), n);
            prop_assert_eq!(packed.roles().iter().filter(|&&r| r == TokenRole::Eot).count(), n);
            for r in 0..packed.len() {
                prop_assert_eq!(packed.matrix().row(r), emb[r / 77].matrix().row(r % 77));
            }
            for (i, p) in prompts.iter().enumerate() {
                prop_assert_eq!(&emb[i], &e.encode(p).unwrap());
            }
        }
    }
}
