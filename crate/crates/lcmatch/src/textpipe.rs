//! Text pipeline: vocabulary loading, tokenization, and segmentation of
//! token sequences into overlapping fixed-width windows.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use crate::error::{Error, Result};

pub const START_OF_TEXT: &str = "<|startoftext|>";
pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const PAD: &str = "<|pad|>";

/// Token table with the three special ids. Ids are assigned by line order in
/// the vocabulary file; the specials are appended after the content tokens
/// when the file does not already define them.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    start_of_text: u32,
    end_of_text: u32,
    pad: u32,
    max_token_bytes: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn start_of_text(&self) -> u32 {
        self.start_of_text
    }

    pub fn end_of_text(&self) -> u32 {
        self.end_of_text
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.start_of_text || id == self.end_of_text || id == self.pad
    }
}

/// Caption as ordered content-token ids. Never contains special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_text: String,
    /// Characters discarded because neither a greedy segmentation nor a
    /// single-character fallback could map them to vocabulary entries.
    pub dropped_chars: u32,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fixed-width overlapping windows over a token sequence. Every row is
/// exactly `context_len` long: start-of-text, content, end-of-text, then pad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowBatch {
    pub windows: Vec<Vec<u32>>,
    /// 1 at non-pad positions, 0 at pad positions, per row.
    pub masks: Vec<Vec<u8>>,
    /// Content offset each window starts at.
    pub starts: Vec<usize>,
    pub context_len: usize,
    pub stride: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn content_capacity(&self) -> usize {
        self.context_len - 2
    }
}

/// Reads a vocabulary: UTF-8, one token per line, ids by line order, the
/// three specials appended in fixed order when absent.
pub fn load_vocabulary<R: Read>(source: R) -> Result<Vocabulary> {
    let reader = BufReader::new(source);
    let mut id_to_token: Vec<String> = Vec::new();
    let mut token_to_id: HashMap<String, u32> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let token = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("vocabulary stream is not valid UTF-8 text: {e}"),
        })?;
        if token.is_empty() {
            return Err(Error::EmptyToken { line: idx + 1 });
        }
        if token_to_id.contains_key(&token) {
            return Err(Error::DuplicateToken { token, line: idx + 1 });
        }
        token_to_id.insert(token.clone(), id_to_token.len() as u32);
        id_to_token.push(token);
    }
    if id_to_token.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    for special in [START_OF_TEXT, END_OF_TEXT, PAD] {
        if !token_to_id.contains_key(special) {
            token_to_id.insert(special.to_string(), id_to_token.len() as u32);
            id_to_token.push(special.to_string());
        }
    }
    let start_of_text = token_to_id[START_OF_TEXT];
    let end_of_text = token_to_id[END_OF_TEXT];
    let pad = token_to_id[PAD];
    let max_token_bytes = id_to_token.iter().map(|t| t.len()).max().unwrap_or(0);
    Ok(Vocabulary {
        token_to_id,
        id_to_token,
        start_of_text,
        end_of_text,
        pad,
        max_token_bytes,
    })
}

pub fn load_vocabulary_file(path: &std::path::Path) -> Result<Vocabulary> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_vocabulary(file)
}

/// Lowercases, splits on whitespace and punctuation, then segments each word
/// by greedy longest-match against the vocabulary. A word the greedy pass
/// cannot fully segment falls back to single-character tokens; characters
/// missing from the vocabulary are dropped and counted.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let lowered = text.to_lowercase();
    let mut ids = Vec::new();
    let mut dropped: u32 = 0;
    for word in lowered.split(|c: char| !c.is_alphanumeric()) {
        if word.is_empty() {
            continue;
        }
        match greedy_segment(word, vocab) {
            Some(mut word_ids) => ids.append(&mut word_ids),
            None => {
                for ch in word.chars() {
                    let mut buf = [0u8; 4];
                    match vocab.id(ch.encode_utf8(&mut buf)) {
                        Some(id) => ids.push(id),
                        None => dropped += 1,
                    }
                }
            }
        }
    }
    TokenSequence { ids, source_text: text.to_string(), dropped_chars: dropped }
}

/// Greedy longest-match segmentation of one word; None when it fails at any
/// position.
fn greedy_segment(word: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let mut ids = Vec::new();
    let mut rest = word;
    while !rest.is_empty() {
        let mut matched = None;
        // candidate prefix end positions, longest first, at char boundaries
        let limit = rest.len().min(vocab.max_token_bytes);
        for end in (1..=limit).rev() {
            if !rest.is_char_boundary(end) {
                continue;
            }
            if let Some(id) = vocab.id(&rest[..end]) {
                matched = Some((id, end));
                break;
            }
        }
        let (id, end) = matched?;
        ids.push(id);
        rest = &rest[end..];
    }
    Some(ids)
}

/// Closed form for the number of windows `make_windows` produces.
pub fn window_count(sequence_length: usize, content_capacity: usize, stride: usize) -> Result<usize> {
    if content_capacity < 1 {
        return Err(Error::InvalidContext { context_len: content_capacity + 2 });
    }
    if stride < 1 || stride > content_capacity {
        return Err(Error::InvalidStride { stride, content_capacity });
    }
    if sequence_length <= content_capacity {
        Ok(1)
    } else {
        Ok((sequence_length - content_capacity).div_ceil(stride) + 1)
    }
}

/// Segments a token sequence into overlapping windows of `context_len`
/// tokens (content capacity `context_len - 2` after the specials). A short
/// sequence yields one padded window; otherwise windows start at multiples
/// of `stride` and the final window is right-aligned on the sequence end.
pub fn make_windows(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    context_len: usize,
    stride: usize,
) -> Result<WindowBatch> {
    if context_len < 3 {
        return Err(Error::InvalidContext { context_len });
    }
    let capacity = context_len - 2;
    if stride < 1 || stride > capacity {
        return Err(Error::InvalidStride { stride, content_capacity: capacity });
    }
    let len = seq.ids.len();

    let starts: Vec<usize> = if len <= capacity {
        vec![0]
    } else {
        let mut starts = Vec::new();
        let mut k = 0usize;
        loop {
            let start = k * stride;
            if start + capacity >= len {
                starts.push(len - capacity);
                break;
            }
            starts.push(start);
            k += 1;
        }
        starts
    };

    let mut windows = Vec::with_capacity(starts.len());
    let mut masks = Vec::with_capacity(starts.len());
    for &start in &starts {
        let end = (start + capacity).min(len);
        let mut row = Vec::with_capacity(context_len);
        row.push(vocab.start_of_text());
        row.extend_from_slice(&seq.ids[start..end]);
        row.push(vocab.end_of_text());
        let valid = row.len();
        row.resize(context_len, vocab.pad());
        let mut mask = vec![0u8; context_len];
        mask[..valid].fill(1);
        windows.push(row);
        masks.push(mask);
    }
    Ok(WindowBatch { windows, masks, starts, context_len, stride })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn vocab_from(tokens: &[&str]) -> Vocabulary {
        load_vocabulary(tokens.join("\n").as_bytes()).unwrap()
    }

    #[test]
    fn two_line_stream_yields_five_tokens() {
        let v = vocab_from(&["chest", "xray"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("chest"), Some(0));
        assert_eq!(v.id("xray"), Some(1));
        assert_eq!(v.start_of_text(), 2);
        assert_eq!(v.end_of_text(), 3);
        assert_eq!(v.pad(), 4);
    }

    #[test]
    fn duplicate_token_is_an_error() {
        let err = load_vocabulary("chest\nchest".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DuplicateToken { line: 2, .. }));
    }

    #[test]
    fn empty_stream_is_an_error() {
        let err = load_vocabulary("".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyVocabulary));
    }

    #[test]
    fn thousand_line_stream_round_trips_by_line_order() {
        let tokens: Vec<String> = (0..1000).map(|i| format!("tok{i}")).collect();
        let joined = tokens.join("\n");
        let v = load_vocabulary(joined.as_bytes()).unwrap();
        assert_eq!(v.len(), 1003);
        for (i, t) in tokens.iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32), "line order assigns ids");
            assert_eq!(v.token(i as u32), Some(t.as_str()), "id -> token -> id identity");
        }
    }

    #[test]
    fn specials_in_stream_are_not_duplicated() {
        let v = vocab_from(&["a", PAD, "b"]);
        assert_eq!(v.len(), 5); // a, pad, b, sot, eot
        assert_eq!(v.pad(), 1);
        assert_eq!(v.start_of_text(), 3);
        assert_eq!(v.end_of_text(), 4);
    }

    #[test]
    fn empty_line_is_an_error() {
        let err = load_vocabulary("a\n\nb".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyToken { line: 2 }));
    }

    #[test]
    fn tokenize_empty_string() {
        let v = vocab_from(&["chest"]);
        let seq = tokenize("", &v);
        assert!(seq.is_empty());
        assert_eq!(seq.dropped_chars, 0);
    }

    #[test]
    fn tokenize_folds_case() {
        let v = vocab_from(&["chest"]);
        let seq = tokenize("Chest chest", &v);
        assert_eq!(seq.ids, vec![0, 0]);
    }

    #[test]
    fn tokenize_splits_on_punctuation() {
        let v = vocab_from(&["pelvic", "x", "ray", "fracture"]);
        let seq = tokenize("pelvic x-ray fracture", &v);
        assert_eq!(seq.ids, vec![0, 1, 2, 3]);
        assert_eq!(seq.dropped_chars, 0);
    }

    /// Brute-force greedy-segmentation oracle: scan the whole token list for
    /// the longest prefix match at every position.
    fn oracle_segment(word: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
        let mut ids = Vec::new();
        let mut rest = word;
        while !rest.is_empty() {
            let mut best: Option<(u32, usize)> = None;
            for id in 0..vocab.len() as u32 {
                if vocab.is_special(id) {
                    continue;
                }
                let tok = vocab.token(id).unwrap();
                if rest.starts_with(tok) {
                    let longer = best.map_or(true, |(_, l)| tok.len() > l);
                    if longer {
                        best = Some((id, tok.len()));
                    }
                }
            }
            let (id, l) = best?;
            ids.push(id);
            rest = &rest[l..];
        }
        Some(ids)
    }

    #[test]
    fn greedy_matches_bruteforce_oracle() {
        let v = vocab_from(&["pelvic", "pel", "vic", "x", "ra", "ray", "f", "r", "a", "c", "t", "u", "e"]);
        for word in ["pelvic", "xray", "fracture", "pelvicx", "rayray", "pelray"] {
            assert_eq!(greedy_segment(word, &v), oracle_segment(word, &v), "word {word}");
        }
    }

    #[test]
    fn oov_word_falls_back_to_chars_and_counts_drops() {
        let v = vocab_from(&["x", "r", "a"]);
        // "xqra": greedy fails ("q" unknown), char fallback keeps x, r, a and drops q
        let seq = tokenize("xqra", &v);
        assert_eq!(seq.ids, vec![0, 1, 2]);
        assert_eq!(seq.dropped_chars, 1);
    }

    #[test]
    fn tokenize_is_deterministic() {
        let v = vocab_from(&["pelvic", "x", "ray", "fracture", "no"]);
        let a = tokenize("Pelvic X-ray: no fracture.", &v);
        let b = tokenize("Pelvic X-ray: no fracture.", &v);
        assert_eq!(a, b);
    }

    fn seq_of_len(n: usize) -> TokenSequence {
        TokenSequence { ids: vec![0; n], source_text: String::new(), dropped_chars: 0 }
    }

    fn tiny_vocab() -> Vocabulary {
        vocab_from(&["w"])
    }

    #[test]
    fn exactly_full_window_is_single() {
        let v = tiny_vocab();
        let batch = make_windows(&seq_of_len(75), &v, 77, 38).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.starts, vec![0]);
        // full capacity: no pad in the row
        assert!(batch.masks[0].iter().all(|&m| m == 1));
    }

    #[test]
    fn long_sequence_right_aligns_final_window() {
        let v = tiny_vocab();
        let batch = make_windows(&seq_of_len(150), &v, 77, 38).unwrap();
        assert_eq!(batch.starts, vec![0, 38, 75]);
        assert_eq!(batch.len(), 3);
        for mask in &batch.masks {
            assert!(mask.iter().all(|&m| m == 1), "multi-window batches carry no pad");
        }
    }

    #[test]
    fn small_context_example_covers_sequence() {
        let v = tiny_vocab();
        let batch = make_windows(&seq_of_len(10), &v, 6, 3).unwrap();
        assert_eq!(batch.starts, vec![0, 3, 6]);
        let capacity = batch.content_capacity();
        let mut covered = vec![false; 10];
        for &s in &batch.starts {
            for c in covered.iter_mut().skip(s).take(capacity) {
                *c = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "brute-force coverage check");
    }

    #[test]
    fn window_rows_have_specials_in_place() {
        let v = vocab_from(&["a", "b"]);
        let seq = TokenSequence { ids: vec![0, 1, 0], source_text: String::new(), dropped_chars: 0 };
        let batch = make_windows(&seq, &v, 8, 3).unwrap();
        assert_eq!(batch.len(), 1);
        let row = &batch.windows[0];
        assert_eq!(row[0], v.start_of_text());
        assert_eq!(row[1..4], [0, 1, 0]);
        assert_eq!(row[4], v.end_of_text());
        assert_eq!(&row[5..], &[v.pad(), v.pad(), v.pad()]);
        assert_eq!(batch.masks[0], vec![1, 1, 1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn empty_sequence_gets_one_padded_window() {
        let v = tiny_vocab();
        let batch = make_windows(&seq_of_len(0), &v, 6, 3).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.windows[0][0], v.start_of_text());
        assert_eq!(batch.windows[0][1], v.end_of_text());
        assert_eq!(batch.masks[0], vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(window_count(0, 75, 38).unwrap(), 1);
    }

    #[test]
    fn stride_and_context_validation() {
        let v = tiny_vocab();
        assert!(matches!(
            make_windows(&seq_of_len(10), &v, 6, 5),
            Err(Error::InvalidStride { stride: 5, content_capacity: 4 })
        ));
        assert!(matches!(
            make_windows(&seq_of_len(10), &v, 2, 1),
            Err(Error::InvalidContext { context_len: 2 })
        ));
        assert!(matches!(
            make_windows(&seq_of_len(10), &v, 6, 0),
            Err(Error::InvalidStride { stride: 0, .. })
        ));
        assert!(window_count(10, 4, 5).is_err());
    }

    #[test]
    fn window_count_closed_form_examples() {
        assert_eq!(window_count(75, 75, 38).unwrap(), 1);
        assert_eq!(window_count(150, 75, 38).unwrap(), 3);
    }

    #[test]
    fn count_matches_make_windows_randomized() {
        let v = tiny_vocab();
        let mut rng = Rng::new(17);
        for _ in 0..2000 {
            let context_len = 3 + rng.next_below(40) as usize;
            let capacity = context_len - 2;
            let stride = 1 + rng.next_below(capacity as u64) as usize;
            let len = rng.next_below(400) as usize;
            let batch = make_windows(&seq_of_len(len), &v, context_len, stride).unwrap();
            assert_eq!(
                batch.len(),
                window_count(len, capacity, stride).unwrap(),
                "len={len} ctx={context_len} stride={stride}"
            );
        }
    }

    #[test]
    fn coverage_overlap_and_roundtrip_randomized() {
        let v = tiny_vocab();
        let mut rng = Rng::new(23);
        for _ in 0..2000 {
            let context_len = 3 + rng.next_below(30) as usize;
            let capacity = context_len - 2;
            let stride = 1 + rng.next_below(capacity as u64) as usize;
            let len = rng.next_below(300) as usize;
            let ids: Vec<u32> = vec![0; len];
            let seq = TokenSequence { ids: ids.clone(), source_text: String::new(), dropped_chars: 0 };
            let batch = make_windows(&seq, &v, context_len, stride).unwrap();

            // starts strictly increasing, regular stride except final
            for pair in batch.starts.windows(2) {
                assert!(pair[0] < pair[1]);
            }
            for (i, pair) in batch.starts.windows(2).enumerate() {
                if i + 2 < batch.starts.len() {
                    assert_eq!(pair[1] - pair[0], stride);
                } else {
                    assert!(pair[1] - pair[0] <= stride);
                }
            }

            // coverage of every content index
            let mut covered = vec![false; len];
            for &s in &batch.starts {
                let end = (s + capacity).min(len);
                for c in covered.iter_mut().take(end).skip(s) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|&c| c));

            // overlap between consecutive windows
            if batch.len() > 1 {
                for (i, pair) in batch.starts.windows(2).enumerate() {
                    let shared = capacity - (pair[1] - pair[0]);
                    if i + 2 < batch.starts.len() {
                        assert_eq!(shared, capacity - stride);
                    } else {
                        assert!(shared >= capacity - stride);
                    }
                }
            }

            // round-trip: write window contents back at their starts
            let mut rebuilt = vec![u32::MAX; len];
            for (w, &s) in batch.windows.iter().zip(&batch.starts) {
                let end = (s + capacity).min(len);
                for (offset, &tok) in w[1..1 + (end - s)].iter().enumerate() {
                    rebuilt[s + offset] = tok;
                }
            }
            assert_eq!(rebuilt, ids);
        }
    }
}
