//! Prompt construction: the dual-slot multi-prompt input layout and the
//! prompt-agnostic attention mask.
//!
//! The input sequence is `M` prompts, then `[CLS]`, then the sentence words.
//! Each prompt carries one position slot and one type slot; the template kind
//! decides what, if anything, surrounds them. Word indices are 1-based and
//! inclusive throughout the crate.

use std::collections::HashMap;

use thiserror::Error;

use crate::nn::AttentionMask;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("prompted sequence of length {len} exceeds encoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sentence must contain at least one word")]
    EmptySentence,
    #[error("prompt count must be at least 1")]
    NoPrompts,
    #[error("duplicate word {word:?} in vocabulary")]
    DuplicateWord { word: String },
}

/// Template variant for one prompt.
///
/// `Default` is the two bare slots, `Hard` wraps them in fixed words
/// ("\[P\] is a \[T\] entity"), `Soft` inserts a learnable context token
/// between them ("\[P\] \<s\> \[T\]").
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    Default,
    Hard,
    Soft,
}

impl TemplateKind {
    /// Tokens contributed by a single prompt.
    pub fn prompt_len(self) -> usize {
        match self {
            TemplateKind::Default => 2,
            TemplateKind::Hard => 5,
            TemplateKind::Soft => 3,
        }
    }

    /// Offsets of the position and type slot inside one prompt.
    pub fn slot_offsets(self) -> (usize, usize) {
        match self {
            TemplateKind::Default => (0, 1),
            TemplateKind::Hard => (0, 3),
            TemplateKind::Soft => (0, 2),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(TemplateKind::Default),
            "hard" => Some(TemplateKind::Hard),
            "soft" => Some(TemplateKind::Soft),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Default => "default",
            TemplateKind::Hard => "hard",
            TemplateKind::Soft => "soft",
        }
    }
}

/// Words the hard template injects around the slots.
const HARD_CONTEXT: [&str; 3] = ["is", "a", "entity"];

/// Token inventory: a handful of reserved ids, `M` position slots, `M` type
/// slots, then the word list. Lookup is total; unknown words map to `[UNK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    prompts: usize,
}

const RESERVED: usize = 4; // [PAD], [CLS], [UNK], <s>

impl Vocab {
    /// Build from a word list (first occurrence wins). The hard-template
    /// context words are always included so every template kind encodes.
    pub fn new<I, S>(words: I, prompts: usize) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if prompts == 0 {
            return Err(TemplateError::NoPrompts);
        }
        let mut list: Vec<String> = Vec::new();
        let mut seen: HashMap<String, u32> = HashMap::new();
        let push = |w: &str, list: &mut Vec<String>, seen: &mut HashMap<String, u32>| {
            if !seen.contains_key(w) {
                seen.insert(w.to_string(), (RESERVED + 2 * prompts + list.len()) as u32);
                list.push(w.to_string());
            }
        };
        for w in words {
            push(w.as_ref(), &mut list, &mut seen);
        }
        for w in HARD_CONTEXT {
            push(w, &mut list, &mut seen);
        }
        Ok(Vocab {
            words: list,
            index: seen,
            prompts,
        })
    }

    /// Rebuild from a previously saved word list; ids must be stable, so the
    /// list is taken verbatim and duplicates are an error.
    pub fn from_saved(words: Vec<String>, prompts: usize) -> Result<Self, TemplateError> {
        if prompts == 0 {
            return Err(TemplateError::NoPrompts);
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index
                .insert(w.clone(), (RESERVED + 2 * prompts + i) as u32)
                .is_some()
            {
                return Err(TemplateError::DuplicateWord { word: w.clone() });
            }
        }
        Ok(Vocab {
            words,
            index,
            prompts,
        })
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn cls_id(&self) -> u32 {
        1
    }
    pub fn unk_id(&self) -> u32 {
        2
    }
    /// The learnable soft-context token `<s>` (an ordinary embedding row).
    pub fn soft_id(&self) -> u32 {
        3
    }
    pub fn position_slot_id(&self, prompt: usize) -> u32 {
        debug_assert!(prompt < self.prompts);
        (RESERVED + prompt) as u32
    }
    pub fn type_slot_id(&self, prompt: usize) -> u32 {
        debug_assert!(prompt < self.prompts);
        (RESERVED + self.prompts + prompt) as u32
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    /// Total number of token ids (= embedding table rows).
    pub fn size(&self) -> usize {
        RESERVED + 2 * self.prompts + self.words.len()
    }

    /// Total lookup: unknown words map to `[UNK]`.
    pub fn lookup(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(self.unk_id())
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Human-readable token name, for diagnostics and tests.
    pub fn token_name(&self, id: u32) -> String {
        let id = id as usize;
        match id {
            0 => "[PAD]".to_string(),
            1 => "[CLS]".to_string(),
            2 => "[UNK]".to_string(),
            3 => "<s>".to_string(),
            _ if id < RESERVED + self.prompts => format!("[P{}]", id - RESERVED + 1),
            _ if id < RESERVED + 2 * self.prompts => {
                format!("[T{}]", id - RESERVED - self.prompts + 1)
            }
            _ => self.words[id - RESERVED - 2 * self.prompts].clone(),
        }
    }
}

/// Token layout of `M` prompts plus the sentence, with slot index maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedSequence {
    pub token_ids: Vec<u32>,
    /// Index of each prompt's position slot in `token_ids`.
    pub position_slots: Vec<usize>,
    /// Index of each prompt's type slot in `token_ids`.
    pub type_slots: Vec<usize>,
    /// Index of the first sentence word (the token after `[CLS]`).
    pub sentence_start: usize,
    /// Sentence word count `N`.
    pub n_words: usize,
    /// Prompt-block length `k` (every token before `[CLS]`).
    pub prompt_len: usize,
}

impl PromptedSequence {
    pub fn prompts(&self) -> usize {
        self.position_slots.len()
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Token index of the 1-based sentence word `j`.
    pub fn word_token_index(&self, word: usize) -> usize {
        debug_assert!(word >= 1 && word <= self.n_words);
        self.sentence_start + word - 1
    }

    /// The mask for this sequence's shape.
    pub fn prompt_agnostic_mask(&self) -> AttentionMask {
        build_prompt_agnostic_mask(self.n_words, self.prompt_len)
    }
}

/// Assemble the prompted input sequence for one sentence.
pub fn build_input(
    sentence: &[String],
    prompts: usize,
    kind: TemplateKind,
    vocab: &Vocab,
    max_len: usize,
) -> Result<PromptedSequence, TemplateError> {
    if prompts == 0 {
        return Err(TemplateError::NoPrompts);
    }
    if sentence.is_empty() {
        return Err(TemplateError::EmptySentence);
    }
    let k = prompts * kind.prompt_len();
    let total = k + 1 + sentence.len();
    if total > max_len {
        return Err(TemplateError::SequenceTooLong {
            len: total,
            max: max_len,
        });
    }
    let mut token_ids = Vec::with_capacity(total);
    let mut position_slots = Vec::with_capacity(prompts);
    let mut type_slots = Vec::with_capacity(prompts);
    for i in 0..prompts {
        let base = token_ids.len();
        let (p_off, t_off) = kind.slot_offsets();
        position_slots.push(base + p_off);
        type_slots.push(base + t_off);
        match kind {
            TemplateKind::Default => {
                token_ids.push(vocab.position_slot_id(i));
                token_ids.push(vocab.type_slot_id(i));
            }
            TemplateKind::Hard => {
                token_ids.push(vocab.position_slot_id(i));
                token_ids.push(vocab.lookup(HARD_CONTEXT[0]));
                token_ids.push(vocab.lookup(HARD_CONTEXT[1]));
                token_ids.push(vocab.type_slot_id(i));
                token_ids.push(vocab.lookup(HARD_CONTEXT[2]));
            }
            TemplateKind::Soft => {
                token_ids.push(vocab.position_slot_id(i));
                token_ids.push(vocab.soft_id());
                token_ids.push(vocab.type_slot_id(i));
            }
        }
    }
    debug_assert_eq!(token_ids.len(), k);
    token_ids.push(vocab.cls_id());
    for w in sentence {
        token_ids.push(vocab.lookup(w));
    }
    Ok(PromptedSequence {
        token_ids,
        position_slots,
        type_slots,
        sentence_start: k + 1,
        n_words: sentence.len(),
        prompt_len: k,
    })
}

/// Mask that blocks the sentence side (including `[CLS]`) from attending to
/// prompt tokens, making the sentence encoding prompt-independent. Prompt
/// rows are never blocked.
pub fn build_prompt_agnostic_mask(n_words: usize, prompt_len: usize) -> AttentionMask {
    let total = prompt_len + 1 + n_words;
    let mut pairs = Vec::with_capacity((n_words + 1) * prompt_len);
    for row in prompt_len..total {
        for col in 0..prompt_len {
            pairs.push((row, col));
        }
    }
    AttentionMask::from_pairs(total, total, &pairs)
        .expect("sentence rows always keep their own columns open")
}
