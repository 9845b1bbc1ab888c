//! Greedy longest-match tokenizer over a fixed vocabulary.
//!
//! The vocabulary carries whole words in bare and space-prefixed forms
//! (`"Paris"` and `" Paris"`), so a space before a known word merges into the
//! word token, mirroring byte-pair tokenizers. Unknown spans fall back to the
//! `<unk>` token one character at a time.

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};

pub const BOS_TOKEN: &str = "<bos>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Token strings; index is the token id.
    vocab: Vec<String>,
    bos_id: u32,
    unk_id: u32,
}

impl Tokenizer {
    /// Builds a tokenizer whose vocabulary is `<bos>`, `<unk>`, then the
    /// given pieces (deduplicated, first occurrence wins).
    pub fn new(pieces: &[String]) -> Self {
        let mut vocab = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for piece in pieces {
            if !piece.is_empty() && !vocab.iter().any(|v| v == piece) {
                vocab.push(piece.clone());
            }
        }
        Self {
            vocab,
            bos_id: 0,
            unk_id: 1,
        }
    }

    /// Convenience constructor: every word in bare and space-prefixed form,
    /// plus the structural pieces needed by the prompt templates.
    pub fn from_words(words: &[String]) -> Self {
        let mut pieces: Vec<String> = vec![
            "Q".into(),
            "A".into(),
            ":".into(),
            "\n".into(),
            " ".into(),
            ".".into(),
            ",".into(),
        ];
        for w in words {
            pieces.push(w.clone());
            pieces.push(format!(" {w}"));
        }
        Self::new(&pieces)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    /// Ids of the non-text tokens (`<bos>`, `<unk>`), masked out wherever the
    /// pipeline samples from the vocabulary.
    pub fn added_vocabulary_ids(&self) -> Vec<u32> {
        vec![self.bos_id, self.unk_id]
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.vocab.iter().position(|v| v == piece).map(|i| i as u32)
    }

    /// Greedy longest-match encoding. Does not prepend `<bos>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let mut best: Option<(usize, u32)> = None;
            for (id, piece) in self.vocab.iter().enumerate() {
                if id as u32 == self.bos_id || id as u32 == self.unk_id {
                    continue;
                }
                if rest.starts_with(piece.as_str()) {
                    let len = piece.len();
                    if best.map_or(true, |(best_len, _)| len > best_len) {
                        best = Some((len, id as u32));
                    }
                }
            }
            match best {
                Some((len, id)) => {
                    out.push(id);
                    rest = &rest[len..];
                }
                None => {
                    out.push(self.unk_id);
                    let ch_len = rest.chars().next().map_or(1, char::len_utf8);
                    rest = &rest[ch_len..];
                }
            }
        }
        out
    }

    /// Encodes a prompt that a continuation will be appended to.
    ///
    /// A rendered prompt ends with the answer cue's trailing space. When the
    /// continuation arrives, that space merges into the continuation's first
    /// token (`"A: "` + `"Paris"` tokenizes as `..., ":", " Paris"`), so the
    /// conditioning prefix must stop before the lone space. This drops a
    /// trailing bare-space token if present.
    pub fn encode_continuation_prefix(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode(text);
        if let Some(&last) = ids.last() {
            if self.token_str(last) == Some(" ") {
                ids.pop();
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| self.token_str(id))
            .collect::<Vec<_>>()
            .join("")
    }

    /// First token of `target` as tokenized in continuation position after
    /// `prefix_text` (handles any merge across the boundary).
    pub fn first_continuation_token(&self, prefix_text: &str, target: &str) -> Result<u32> {
        if target.is_empty() {
            return Err(FvError::Tokenization("empty target".into()));
        }
        let prefix = self.encode_continuation_prefix(prefix_text);
        let full = self.encode(&format!("{prefix_text}{target}"));
        let shared = prefix
            .iter()
            .zip(&full)
            .take_while(|(a, b)| a == b)
            .count();
        if shared != prefix.len() {
            return Err(FvError::Tokenization(format!(
                "continuation re-tokenized the prompt prefix for target {target:?}"
            )));
        }
        full.get(shared).copied().ok_or_else(|| {
            FvError::Tokenization(format!("target {target:?} tokenizes to nothing"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tk() -> Tokenizer {
        Tokenizer::from_words(&["Japan".into(), "Tokyo".into(), "Egypt".into(), "Cairo".into()])
    }

    #[test]
    fn encodes_demo_prompt_with_space_merges() {
        let t = tk();
        let ids = t.encode("Q: Japan\nA: Tokyo");
        let pieces: Vec<&str> = ids.iter().map(|&i| t.token_str(i).unwrap()).collect();
        assert_eq!(pieces, vec!["Q", ":", " Japan", "\n", "A", ":", " Tokyo"]);
    }

    #[test]
    fn round_trips_known_text() {
        let t = tk();
        let text = "Q: Egypt\nA: Cairo\n\nQ: Japan\nA: ";
        assert_eq!(t.decode(&t.encode(text)), text);
    }

    #[test]
    fn continuation_prefix_drops_trailing_cue_space() {
        let t = tk();
        let ids = t.encode_continuation_prefix("Q: Egypt\nA: ");
        let pieces: Vec<&str> = ids.iter().map(|&i| t.token_str(i).unwrap()).collect();
        assert_eq!(pieces, vec!["Q", ":", " Egypt", "\n", "A", ":"]);
    }

    #[test]
    fn first_continuation_token_merges_leading_space() {
        let t = tk();
        let id = t.first_continuation_token("Q: Egypt\nA: ", "Cairo").unwrap();
        assert_eq!(t.token_str(id), Some(" Cairo"));
    }

    #[test]
    fn first_continuation_token_without_cue_space() {
        let t = tk();
        let id = t.first_continuation_token("Q: Egypt\nA:", " Cairo").unwrap();
        assert_eq!(t.token_str(id), Some(" Cairo"));
    }

    #[test]
    fn empty_target_is_a_tokenization_error() {
        let t = tk();
        assert!(matches!(
            t.first_continuation_token("A: ", ""),
            Err(FvError::Tokenization(_))
        ));
    }

    #[test]
    fn unknown_spans_fall_back_to_unk() {
        let t = tk();
        let ids = t.encode("Q: zz");
        assert!(ids.contains(&t.unk_id()));
    }

    #[test]
    fn round_trip_prefix_property_over_task_words() {
        let t = tk();
        for target in ["Japan", "Tokyo", "Egypt", "Cairo"] {
            let id = t.first_continuation_token("Q: Egypt\nA: ", target).unwrap();
            let piece = t.token_str(id).unwrap();
            let spaced = format!(" {target}");
            assert!(
                spaced.starts_with(piece) || target.starts_with(piece),
                "{piece:?} is not a prefix of {target:?} or {spaced:?}"
            );
        }
    }
}
