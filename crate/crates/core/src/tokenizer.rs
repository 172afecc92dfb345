//! Byte-pair subword vocabulary for report text and the whole-word
//! vocabulary used for indicator phrases.
//!
//! Text is split into chunks at every space that follows a non-space, so a
//! chunk carries its leading whitespace (`"no pneumonia."` becomes
//! `["no", " pneumonia."]`). Merges never cross chunk boundaries and the
//! concatenation of decoded chunks reproduces the input exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const VOCAB_HEADER: &str = "bpe-vocab v1";

/// Lowercases report text before training and encoding.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
}

/// Splits text into merge domains; each chunk keeps its leading spaces.
pub fn chunks(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i] == b' ' && bytes[i - 1] != b' ' {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocab {
    /// Byte content of each token; specials have empty content.
    tokens: Vec<Vec<u8>>,
    /// `(left, right)` id pairs in application order.
    merges: Vec<(u32, u32)>,
    byte_ids: HashMap<u8, u32>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

/// Outcome of [`train_bpe`].
#[derive(Clone, Debug)]
pub struct BpeTraining {
    pub vocab: SubwordVocab,
    /// False when no further pair existed before `target_size` was reached.
    pub reached_target: bool,
}

/// Learns byte-pair merges over `corpus` until the vocabulary holds
/// `target_size` tokens or no adjacent pair is left.
///
/// At each step the most frequent adjacent pair is merged; ties go to the
/// lexicographically smallest `(left, right)` byte strings.
pub fn train_bpe(corpus: &[String], target_size: usize) -> Result<BpeTraining> {
    if corpus.is_empty() {
        return Err(Error::contract("bpe training needs a nonempty corpus"));
    }
    let docs: Vec<String> = corpus.iter().map(|d| normalize(d)).collect();
    let mut alphabet: Vec<u8> = docs.iter().flat_map(|d| d.bytes()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    if target_size <= alphabet.len() + SPECIALS.len() {
        return Err(Error::Config(format!(
            "target vocabulary size {target_size} must exceed {} specials plus {} distinct bytes",
            SPECIALS.len(),
            alphabet.len()
        )));
    }

    let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); SPECIALS.len()];
    tokens.extend(alphabet.iter().map(|&b| vec![b]));
    let mut index: HashMap<Vec<u8>, u32> = tokens
        .iter()
        .enumerate()
        .skip(SPECIALS.len())
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    // chunk → frequency, in first-seen order for determinism
    let mut words: Vec<(Vec<u32>, usize)> = Vec::new();
    let mut seen: HashMap<&[u8], usize> = HashMap::new();
    for doc in &docs {
        for chunk in chunks(doc) {
            if let Some(&i) = seen.get(chunk) {
                words[i].1 += 1;
            } else {
                seen.insert(chunk, words.len());
                words.push((chunk.iter().map(|b| index[&vec![*b]]).collect(), 1));
            }
        }
    }

    let mut merges = Vec::new();
    let mut reached = true;
    while tokens.len() < target_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, freq) in &words {
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += freq;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            reached = false;
            break;
        };
        let mut merged = tokens[left as usize].clone();
        merged.extend_from_slice(&tokens[right as usize]);
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        merges.push((left, right));
        for (ids, _) in &mut words {
            *ids = apply_merge(ids, left, right, new_id);
        }
    }
    if !reached {
        log::warn!(
            "bpe training stopped at a fixpoint with {} of {target_size} tokens",
            tokens.len()
        );
    }
    Ok(BpeTraining {
        vocab: SubwordVocab::from_parts(tokens, merges)?,
        reached_target: reached,
    })
}

/// Replaces every non-overlapping `(left, right)` occurrence, scanning left to right.
fn apply_merge(ids: &[u32], left: u32, right: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

impl SubwordVocab {
    fn from_parts(tokens: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::contract("vocabulary is missing special tokens"));
        }
        let index: HashMap<&[u8], u32> = tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (t.as_slice(), i as u32))
            .collect();
        let byte_ids = tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .filter(|(_, t)| t.len() == 1)
            .map(|(i, t)| (t[0], i as u32))
            .collect();
        let mut merge_rank = HashMap::new();
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let (Some(lt), Some(rt)) = (tokens.get(l as usize), tokens.get(r as usize)) else {
                return Err(Error::contract(format!("merge {rank} references unknown token")));
            };
            let mut merged = lt.clone();
            merged.extend_from_slice(rt);
            let out = *index.get(merged.as_slice()).ok_or_else(|| {
                Error::contract(format!("merge {rank} produces a token missing from the vocabulary"))
            })?;
            merge_rank.entry((l, r)).or_insert((rank, out));
        }
        Ok(SubwordVocab {
            tokens,
            merges,
            byte_ids,
            merge_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Display form of a token; specials render as their names.
    pub fn token_str(&self, id: u32) -> String {
        match SPECIALS.get(id as usize) {
            Some(s) => s.to_string(),
            None => String::from_utf8_lossy(&self.tokens[id as usize]).into_owned(),
        }
    }

    pub fn token_bytes(&self, id: u32) -> &[u8] {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            out.extend(self.encode_chunk(chunk));
        }
        out
    }

    fn encode_chunk(&self, chunk: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = chunk
            .iter()
            .map(|b| self.byte_ids.get(b).copied().unwrap_or(UNK))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(r, o)| (r, w[0], w[1], o)))
                .min();
            let Some((_, l, r, o)) = best else { break };
            ids = apply_merge(&ids, l, r, o);
        }
        ids
    }

    /// Concatenates token bytes; `<pad>`, `<bos>` and `<eos>` decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => bytes.extend_from_slice(SPECIALS[UNK as usize].as_bytes()),
                _ => {
                    if let Some(t) = self.tokens.get(id as usize) {
                        bytes.extend_from_slice(t);
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Vocabulary file body: header then one escaped token per line.
    pub fn vocab_lines(&self) -> String {
        let mut s = format!("{VOCAB_HEADER} size={}\n", self.len());
        for (i, t) in self.tokens.iter().enumerate() {
            match SPECIALS.get(i) {
                Some(name) => s.push_str(name),
                None => s.push_str(&escape(t)),
            }
            s.push('\n');
        }
        s
    }

    /// Merges file body: one `left right` pair per line in application order.
    pub fn merge_lines(&self) -> String {
        let mut s = String::new();
        for &(l, r) in &self.merges {
            let _ = writeln!(
                s,
                "{} {}",
                escape(&self.tokens[l as usize]),
                escape(&self.tokens[r as usize])
            );
        }
        s
    }

    pub fn from_lines(vocab: &str, merges: &str) -> Result<Self> {
        let mut lines = vocab.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "empty vocabulary file".into(),
        })?;
        let size: usize = header
            .strip_prefix(VOCAB_HEADER)
            .and_then(|r| r.trim().strip_prefix("size="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                reason: format!("expected header '{VOCAB_HEADER} size=<v>', got '{header}'"),
            })?;
        let mut tokens = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            if i < SPECIALS.len() {
                if line != SPECIALS[i] {
                    return Err(Error::Parse {
                        line: i + 2,
                        reason: format!("expected special token {}", SPECIALS[i]),
                    });
                }
                tokens.push(Vec::new());
            } else {
                tokens.push(unescape(line).map_err(|reason| Error::Parse { line: i + 2, reason })?);
            }
        }
        if tokens.len() != size {
            return Err(Error::Parse {
                line: 1,
                reason: format!("header declares {size} tokens, file has {}", tokens.len()),
            });
        }
        let index: HashMap<&[u8], u32> = tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (t.as_slice(), i as u32))
            .collect();
        let mut pairs = Vec::new();
        for (i, line) in merges.lines().enumerate() {
            let err = |reason: String| Error::Parse { line: i + 1, reason };
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| err("expected 'left right'".into()))?;
            let l = unescape(l).map_err(err)?;
            let r = unescape(r).map_err(err)?;
            let lookup = |t: &Vec<u8>| {
                index
                    .get(t.as_slice())
                    .copied()
                    .ok_or_else(|| err(format!("unknown token '{}'", escape(t))))
            };
            pairs.push((lookup(&l)?, lookup(&r)?));
        }
        SubwordVocab::from_parts(tokens, pairs)
    }

    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        std::fs::write(vocab_path, self.vocab_lines()).map_err(|e| Error::file(vocab_path, e))?;
        std::fs::write(merges_path, self.merge_lines()).map_err(|e| Error::file(merges_path, e))?;
        Ok(())
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let v = std::fs::read_to_string(vocab_path).map_err(|e| Error::file(vocab_path, e))?;
        let m = std::fs::read_to_string(merges_path).map_err(|e| Error::file(merges_path, e))?;
        SubwordVocab::from_lines(&v, &m)
    }
}

/// Printable ASCII other than space and backslash is written verbatim;
/// every other byte becomes `\xHH`.
fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| bytes.get(i + 1) == Some(&b'x'))
                .ok_or_else(|| format!("bad escape in '{s}'"))?;
            out.push(u8::from_str_radix(hex, 16).map_err(|e| e.to_string())?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

/// Whole-word vocabulary for indicator phrases. Ids are dense in
/// first-insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndicatorVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl IndicatorVocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = IndicatorVocab::default();
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    pub fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(docs: &[&str]) -> Vec<String> {
        docs.iter().map(|s| s.to_string()).collect()
    }

    fn token(v: &SubwordVocab, id: u32) -> &[u8] {
        v.token_bytes(id)
    }

    #[test]
    fn aaaa_merges_pairs_then_quads() {
        // "aaaa": (a,a) occurs 3 times → "aa"; then [aa, aa] → "aaaa"
        let v = train_bpe(&corpus(&["aaaa"]), 6).unwrap().vocab;
        assert_eq!(v.len(), 6);
        assert_eq!(token(&v, 5), b"aa");
        let t = train_bpe(&corpus(&["aaaa"]), 7).unwrap();
        assert!(t.reached_target);
        assert_eq!(token(&t.vocab, 5), b"aa");
        assert_eq!(token(&t.vocab, 6), b"aaaa");
        assert_eq!(t.vocab.encode("aaaa"), vec![6]);
        // nothing left to merge after "aaaa"
        let t = train_bpe(&corpus(&["aaaa"]), 20).unwrap();
        assert!(!t.reached_target);
        assert_eq!(t.vocab.len(), 7);
    }

    #[test]
    fn empty_document_contributes_nothing() {
        let t = train_bpe(&corpus(&["", "ab"]), 7).unwrap();
        // specials + {a, b} + "ab"
        assert_eq!(t.vocab.len(), 7);
        assert!(t.reached_target);
        let only = train_bpe(&corpus(&["ab"]), 7).unwrap();
        assert_eq!(t.vocab, only.vocab);
    }

    #[test]
    fn target_must_exceed_alphabet() {
        assert!(train_bpe(&corpus(&["abc"]), 7).is_err());
        assert!(train_bpe(&[], 10).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b) and (c,d) both occur once; "ab" < "cd"
        let v = train_bpe(&corpus(&["cd", "ab"]), 10).unwrap().vocab;
        let first = v.merges()[0];
        assert_eq!((token(&v, first.0), token(&v, first.1)), (&b"a"[..], &b"b"[..]));
    }

    #[test]
    fn retraining_is_deterministic() {
        let docs = corpus(&["no pneumonia. small pleural effusion.", "no fracture. no pneumonia."]);
        let a = train_bpe(&docs, 60).unwrap().vocab;
        let b = train_bpe(&docs, 60).unwrap().vocab;
        assert_eq!(a, b);
        assert_eq!(a.vocab_lines(), b.vocab_lines());
    }

    #[test]
    fn empty_text_round_trips() {
        let v = train_bpe(&corpus(&["abc"]), 9).unwrap().vocab;
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]), "");
    }

    #[test]
    fn pleural_effusion_round_trips() {
        let v = train_bpe(&corpus(&["pleural effusion is present."]), 40).unwrap().vocab;
        let ids = v.encode("pleural effusion");
        assert_eq!(v.decode(&ids), "pleural effusion");
    }

    #[test]
    fn unknown_bytes_map_to_unk() {
        let v = train_bpe(&corpus(&["ab"]), 7).unwrap().vocab;
        assert_eq!(v.encode("azb"), vec![v.encode("a")[0], UNK, v.encode("b")[0]]);
    }

    #[test]
    fn chunks_keep_leading_space() {
        assert_eq!(chunks("no pneumonia."), vec![&b"no"[..], &b" pneumonia."[..]]);
        assert_eq!(chunks(" a  b"), vec![&b" a"[..], &b"  b"[..]]);
        assert!(chunks("").is_empty());
    }

    #[test]
    fn files_round_trip() {
        let v = train_bpe(&corpus(&["a\\b c d\tc", "ab ab"]), 30).unwrap().vocab;
        let back = SubwordVocab::from_lines(&v.vocab_lines(), &v.merge_lines()).unwrap();
        assert_eq!(v, back);
        assert!(v.vocab_lines().starts_with(&format!("bpe-vocab v1 size={}\n", v.len())));
    }

    #[test]
    fn malformed_vocab_header_is_rejected() {
        assert!(matches!(
            SubwordVocab::from_lines("vocab\n", ""),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    /// Replays the merge list in rank order, one rule at a time over the
    /// whole chunk. Independent of the priority-driven encoder.
    fn replay_oracle(v: &SubwordVocab, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            let mut ids: Vec<u32> = chunk
                .iter()
                .map(|&b| {
                    (SPECIALS.len()..v.len())
                        .find(|&i| v.token_bytes(i as u32) == [b])
                        .map_or(UNK, |i| i as u32)
                })
                .collect();
            for &(l, r) in v.merges() {
                let mut merged = v.token_bytes(l).to_vec();
                merged.extend_from_slice(v.token_bytes(r));
                let out_id = (SPECIALS.len()..v.len())
                    .find(|&i| v.token_bytes(i as u32) == merged.as_slice())
                    .unwrap() as u32;
                ids = apply_merge(&ids, l, r, out_id);
            }
            out.extend(ids);
        }
        out
    }

    #[test]
    fn greedy_encoder_matches_replay_oracle_exhaustively() {
        let docs = corpus(&["abba aab baba", "ab ab ba", "bbb a"]);
        let v = train_bpe(&docs, 20).unwrap().vocab;
        let alphabet = [b'a', b'b', b' '];
        let mut checked = 0;
        for len in 0..=8u32 {
            for code in 0..3usize.pow(len) {
                let mut c = code;
                let s: String = (0..len)
                    .map(|_| {
                        let ch = alphabet[c % 3] as char;
                        c /= 3;
                        ch
                    })
                    .collect();
                assert_eq!(v.encode(&s), replay_oracle(&v, &s), "{s:?}");
                assert_eq!(v.decode(&v.encode(&s)), s);
                checked += 1;
            }
        }
        assert_eq!(checked, (0..=8).map(|l| 3usize.pow(l)).sum::<usize>());
    }

    #[test]
    fn indicator_vocab_ids_are_dense() {
        let v = IndicatorVocab::from_words(["lung", "oedema", "uncertain", "lung"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("oedema"), Some(1));
        assert_eq!(v.word(2), Some("uncertain"));
        assert_eq!(v.id("heart"), None);
    }

    proptest! {
        #[test]
        fn training_corpus_round_trips(
            docs in proptest::collection::vec("[a-e .]{0,24}", 1..6),
            extra in 1usize..40,
        ) {
            let docs: Vec<String> = docs;
            let alphabet: std::collections::BTreeSet<u8> = docs.iter().flat_map(|d| d.bytes()).collect();
            let t = train_bpe(&docs, SPECIALS.len() + alphabet.len() + extra).unwrap();
            for d in &docs {
                let ids = t.vocab.encode(d);
                prop_assert!(ids.iter().all(|&i| (i as usize) < t.vocab.len() && i >= SPECIALS.len() as u32));
                prop_assert_eq!(&t.vocab.decode(&ids), d);
            }
        }
    }
}
