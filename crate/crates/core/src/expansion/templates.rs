//! Indicator phrases and report sentences.
//!
//! Each (indicator, state) pair owns a short word phrase, which feeds the
//! expansion GRU, and a full sentence, from which synthetic reports are
//! assembled. Both are editable through a plain text file with lines of the
//! form `indicator_id|state_id|phrase words|template sentence`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::IndicatorVocab;

pub const DEFAULT_INDICATORS: [&str; 11] = [
    "cardiomediastinal silhouette",
    "pneumothorax",
    "granuloma",
    "consolidation",
    "pleural effusion",
    "pneumonia",
    "lung opacity",
    "pulmonary edema",
    "cardiomegaly",
    "atelectasis",
    "fracture",
];

/// State names in id order.
pub const DEFAULT_STATES: [&str; 3] = ["uncertain", "negative", "positive"];

/// Sentences for the default indicators, ordered uncertain, negative, positive.
const DEFAULT_SENTENCES: [[&str; 3]; 11] = [
    [
        "the cardiomediastinal silhouette is borderline.",
        "the cardiomediastinal silhouette is within normal limits.",
        "the cardiomediastinal silhouette is enlarged.",
    ],
    [
        "a small pneumothorax cannot be excluded.",
        "no pneumothorax.",
        "there is a pneumothorax.",
    ],
    [
        "possible granuloma.",
        "no calcified granuloma.",
        "a calcified granuloma is seen.",
    ],
    [
        "questionable consolidation.",
        "no focal consolidation.",
        "there is focal consolidation.",
    ],
    [
        "a small pleural effusion is possible.",
        "no pleural effusion.",
        "there is a pleural effusion.",
    ],
    [
        "pneumonia cannot be excluded.",
        "no evidence of pneumonia.",
        "findings are consistent with pneumonia.",
    ],
    [
        "there is a faint lung opacity.",
        "the lungs are clear.",
        "there is a lung opacity.",
    ],
    [
        "mild pulmonary edema is suspected.",
        "no pulmonary edema.",
        "there is pulmonary edema.",
    ],
    [
        "the heart size is borderline.",
        "the heart size is normal.",
        "cardiomegaly is present.",
    ],
    [
        "minimal atelectasis is possible.",
        "no atelectasis.",
        "there is atelectasis.",
    ],
    [
        "a fracture cannot be excluded.",
        "no acute fracture.",
        "there is an acute fracture.",
    ],
];

#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorTemplates {
    indicators: Vec<String>,
    states: Vec<String>,
    /// `[t][m]` word phrase.
    phrases: Vec<Vec<Vec<String>>>,
    /// `[t][m]` report sentence.
    sentences: Vec<Vec<String>>,
    vocab: IndicatorVocab,
}

impl Default for IndicatorTemplates {
    fn default() -> Self {
        let sentences = DEFAULT_SENTENCES
            .iter()
            .map(|row| row.iter().map(|s| s.to_string()).collect())
            .collect();
        IndicatorTemplates::from_parts(
            DEFAULT_INDICATORS.iter().map(|s| s.to_string()).collect(),
            DEFAULT_STATES.iter().map(|s| s.to_string()).collect(),
            None,
            sentences,
        )
        .expect("default templates are well formed")
    }
}

impl IndicatorTemplates {
    /// Templates for arbitrary indicator and state names. Phrases are
    /// `name words + state word`. The default eleven indicators with the
    /// three default states get hand-written sentences; anything else gets
    /// generic ones.
    pub fn with_names(indicators: &[String], states: &[String]) -> Result<Self> {
        let defaults = indicators.len() <= DEFAULT_INDICATORS.len()
            && states.len() == DEFAULT_STATES.len()
            && states.iter().zip(DEFAULT_STATES).all(|(a, b)| a == b);
        let sentences = indicators
            .iter()
            .map(|name| {
                let known = DEFAULT_INDICATORS.iter().position(|d| d == name);
                states
                    .iter()
                    .enumerate()
                    .map(|(m, state)| match known {
                        Some(t) if defaults => DEFAULT_SENTENCES[t][m].to_string(),
                        _ => format!("{name} is {state}."),
                    })
                    .collect()
            })
            .collect();
        IndicatorTemplates::from_parts(indicators.to_vec(), states.to_vec(), None, sentences)
    }

    /// The first `count` default indicators with the default states.
    pub fn default_subset(count: usize) -> Result<Self> {
        if count == 0 || count > DEFAULT_INDICATORS.len() {
            return Err(Error::Config(format!(
                "default templates cover 1..={} indicators, asked for {count}",
                DEFAULT_INDICATORS.len()
            )));
        }
        let names: Vec<String> = DEFAULT_INDICATORS[..count].iter().map(|s| s.to_string()).collect();
        let states: Vec<String> = DEFAULT_STATES.iter().map(|s| s.to_string()).collect();
        IndicatorTemplates::with_names(&names, &states)
    }

    fn from_parts(
        indicators: Vec<String>,
        states: Vec<String>,
        phrases: Option<Vec<Vec<Vec<String>>>>,
        sentences: Vec<Vec<String>>,
    ) -> Result<Self> {
        let phrases = phrases.unwrap_or_else(|| {
            indicators
                .iter()
                .map(|name| {
                    states
                        .iter()
                        .map(|state| {
                            name.split_whitespace()
                                .chain(std::iter::once(state.as_str()))
                                .map(str::to_string)
                                .collect()
                        })
                        .collect()
                })
                .collect()
        });
        let (t, m) = (indicators.len(), states.len());
        if t == 0 || m == 0 {
            return Err(Error::Config("templates need at least one indicator and one state".into()));
        }
        for (ti, (p, s)) in phrases.iter().zip(&sentences).enumerate() {
            if p.len() != m || s.len() != m {
                return Err(Error::Config(format!("indicator {ti} does not cover all {m} states")));
            }
            if p.iter().any(Vec::is_empty) || s.iter().any(|x| x.trim().is_empty()) {
                return Err(Error::Config(format!("indicator {ti} has an empty phrase or sentence")));
            }
        }
        if phrases.len() != t || sentences.len() != t {
            return Err(Error::Config("phrase table does not cover every indicator".into()));
        }
        let vocab = IndicatorVocab::from_words(phrases.iter().flatten().flatten());
        Ok(IndicatorTemplates {
            indicators,
            states,
            phrases,
            sentences,
            vocab,
        })
    }

    pub fn num_indicators(&self) -> usize {
        self.indicators.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn indicator_name(&self, t: usize) -> &str {
        &self.indicators[t]
    }

    pub fn state_name(&self, m: usize) -> &str {
        &self.states[m]
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicators
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn vocab(&self) -> &IndicatorVocab {
        &self.vocab
    }

    pub fn phrase(&self, t: usize, m: usize) -> &[String] {
        &self.phrases[t][m]
    }

    pub fn sentence(&self, t: usize, m: usize) -> &str {
        &self.sentences[t][m]
    }

    /// Report text for one state per indicator, sentences in indicator order.
    pub fn report(&self, states: &[usize]) -> String {
        states
            .iter()
            .enumerate()
            .map(|(t, &m)| self.sentence(t, m))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Indicator id from its name, with `_` accepted for spaces, or from a
    /// numeric id.
    pub fn find_indicator(&self, key: &str) -> Option<usize> {
        let key = key.trim().replace('_', " ");
        self.indicators
            .iter()
            .position(|n| n.eq_ignore_ascii_case(&key))
            .or_else(|| key.parse().ok().filter(|&t| t < self.indicators.len()))
    }

    pub fn find_state(&self, key: &str) -> Option<usize> {
        let key = key.trim();
        self.states
            .iter()
            .position(|n| n.eq_ignore_ascii_case(key))
            .or_else(|| key.parse().ok().filter(|&m| m < self.states.len()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in 0..self.num_indicators() {
            for m in 0..self.num_states() {
                let _ = writeln!(s, "{t}|{m}|{}|{}", self.phrases[t][m].join(" "), self.sentences[t][m]);
            }
        }
        s
    }

    /// Parses a template file. Indicator names are recovered as the word
    /// prefix shared by all of an indicator's phrases; state names as the
    /// last phrase word when it is the same across indicators.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, usize, Vec<String>, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(4, '|').collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    reason: "expected indicator_id|state_id|phrase|sentence".into(),
                });
            }
            let parse_id = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    reason: format!("bad id '{s}'"),
                })
            };
            let words: Vec<String> = parts[2].split_whitespace().map(str::to_string).collect();
            rows.push((parse_id(parts[0])?, parse_id(parts[1])?, words, parts[3].trim().to_string()));
        }
        let t = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let m = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut phrases = vec![vec![Vec::new(); m]; t];
        let mut sentences = vec![vec![String::new(); m]; t];
        for (ti, mi, words, sentence) in rows {
            phrases[ti][mi] = words;
            sentences[ti][mi] = sentence;
        }
        let indicators = (0..t)
            .map(|ti| {
                let first = &phrases[ti][0];
                let mut len = first.len().saturating_sub(1);
                for p in &phrases[ti] {
                    len = len.min(p.iter().zip(first).take_while(|(a, b)| a == b).count());
                }
                if len == 0 {
                    format!("indicator{ti}")
                } else {
                    first[..len].join(" ")
                }
            })
            .collect();
        let states = (0..m)
            .map(|mi| {
                let last = phrases.first().and_then(|p| p[mi].last()).cloned();
                match last {
                    Some(w) if phrases.iter().all(|p| p[mi].last() == Some(&w)) => w,
                    _ => format!("state{mi}"),
                }
            })
            .collect();
        IndicatorTemplates::from_parts(indicators, states, Some(phrases), sentences)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        IndicatorTemplates::from_text(&text)
    }
}
