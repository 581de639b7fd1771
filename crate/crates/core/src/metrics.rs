//! VisuGen-auto metrics: Visual Grounding, Creativity, Instruction
//! Adherence and their mean. Every score is a deterministic surface-level
//! function of the text, so results are reproducible bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::svi::{salient_elements, SviDocument};
use crate::text::{contains_phrase, content_words, count_lines, tokenize};

const DEFAULT_STYLE_LEXICON: &str = include_str!("../data/lexicon/style.txt");

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("unscorable empty text")]
    EmptyText,
    #[error("invalid creativity weights: {0}")]
    InvalidWeights(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub vg: f64,
    pub c: f64,
    pub ia: f64,
    pub mean: f64,
}

impl MetricScores {
    pub fn new(vg: f64, c: f64, ia: f64) -> Self {
        Self {
            vg,
            c,
            ia,
            mean: (vg + c + ia) / 3.0,
        }
    }
}

/// Constraints recovered from an instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default)]
    pub theme_keywords: Vec<String>,
    #[serde(default)]
    pub style_keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_words: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_words: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_lines: Option<usize>,
    #[serde(default)]
    pub forbidden_terms: Vec<String>,
}

impl ConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.theme_keywords.is_empty()
            && self.style_keywords.is_empty()
            && self.min_words.is_none()
            && self.max_words.is_none()
            && self.min_lines.is_none()
            && self.forbidden_terms.is_empty()
    }

    /// Number of pass/fail checks this set contributes to adherence.
    pub fn check_count(&self) -> usize {
        let words = usize::from(self.min_words.is_some() || self.max_words.is_some());
        self.theme_keywords.len()
            + self.style_keywords.len()
            + words
            + usize::from(self.min_lines.is_some())
            + self.forbidden_terms.len()
    }

    /// Theme and style keywords, the terms a generation is asked to carry.
    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.style_keywords
            .iter()
            .chain(&self.theme_keywords)
            .map(String::as_str)
    }
}

/// Groups of interchangeable style adjectives.
#[derive(Debug, Clone)]
pub struct StyleLexicon {
    groups: Vec<Vec<String>>,
}

impl StyleLexicon {
    pub fn parse(text: &str) -> Self {
        let groups = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|line| {
                let (head, rest) = line.split_once(':')?;
                let mut group = vec![head.trim().to_lowercase()];
                group.extend(
                    rest.split(',')
                        .map(|s| s.trim().to_lowercase())
                        .filter(|s| !s.is_empty()),
                );
                Some(group)
            })
            .collect();
        Self { groups }
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = fs::read_to_string(path).map_err(|source| MetricError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    pub fn bundled() -> &'static StyleLexicon {
        static LEX: OnceLock<StyleLexicon> = OnceLock::new();
        LEX.get_or_init(|| StyleLexicon::parse(DEFAULT_STYLE_LEXICON))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.groups.iter().any(|g| g.iter().any(|w| w == word))
    }

    /// Every word sharing a group with `word`, excluding `word` itself.
    pub fn synonyms(&self, word: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .groups
            .iter()
            .filter(|g| g.iter().any(|w| w == word))
            .flatten()
            .map(String::as_str)
            .filter(|w| *w != word)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// 4-grams of a reference corpus, used to penalize reused phrasing.
#[derive(Debug, Clone, Default)]
pub struct ReferenceCorpus {
    fourgrams: HashSet<Vec<String>>,
    documents: usize,
}

impl ReferenceCorpus {
    pub fn from_documents<I, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut corpus = Self::default();
        for doc in docs {
            let tokens = tokenize(doc.as_ref());
            corpus.fourgrams.extend(tokens.windows(4).map(<[String]>::to_vec));
            corpus.documents += 1;
        }
        corpus
    }

    /// Reads every regular file in `dir` (sorted by name) as one document.
    pub fn load_dir(dir: &Path) -> Result<Self, MetricError> {
        let io = |source| MetricError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut docs = Vec::with_capacity(paths.len());
        for path in paths {
            docs.push(fs::read_to_string(&path).map_err(|source| MetricError::Io {
                path: path.display().to_string(),
                source,
            })?);
        }
        Ok(Self::from_documents(docs))
    }

    pub fn is_empty(&self) -> bool {
        self.fourgrams.is_empty()
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    fn contains(&self, gram: &[String]) -> bool {
        self.fourgrams.contains(gram)
    }
}

/// Weights of distinct-bigram ratio, type-token ratio and corpus novelty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreativityWeights {
    pub distinct_bigrams: f64,
    pub type_token: f64,
    pub novelty: f64,
}

impl Default for CreativityWeights {
    fn default() -> Self {
        Self {
            distinct_bigrams: 0.4,
            type_token: 0.3,
            novelty: 0.3,
        }
    }
}

impl CreativityWeights {
    pub fn validate(&self) -> Result<(), MetricError> {
        let parts = [self.distinct_bigrams, self.type_token, self.novelty];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MetricError::InvalidWeights("weights must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricError::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Fraction of salient elements whose surface string or a synonym occurs in
/// `text` as a whole-word sequence.
pub fn visual_grounding(text: &str, doc: &SviDocument) -> f64 {
    let elements = salient_elements(doc);
    if elements.is_empty() {
        return 0.0;
    }
    let tokens = tokenize(text);
    let matched = elements
        .iter()
        .filter(|e| e.forms().any(|form| contains_phrase(&tokens, form)))
        .count();
    matched as f64 / elements.len() as f64
}

pub fn creativity(
    text: &str,
    corpus: &ReferenceCorpus,
    weights: &CreativityWeights,
) -> Result<f64, MetricError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(MetricError::EmptyText);
    }

    let distinct_bigrams = if tokens.len() < 2 {
        0.0
    } else {
        let bigrams: Vec<&[String]> = tokens.windows(2).collect();
        let distinct: HashSet<&[String]> = bigrams.iter().copied().collect();
        distinct.len() as f64 / bigrams.len() as f64
    };

    let types: HashSet<&String> = tokens.iter().collect();
    let type_token = types.len() as f64 / tokens.len() as f64;

    let overlap = if corpus.is_empty() || tokens.len() < 4 {
        0.0
    } else {
        let grams: Vec<&[String]> = tokens.windows(4).collect();
        let seen = grams.iter().filter(|g| corpus.contains(g)).count();
        seen as f64 / grams.len() as f64
    };

    let score = weights.distinct_bigrams * distinct_bigrams
        + weights.type_token * type_token
        + weights.novelty * (1.0 - overlap);
    Ok(score.clamp(0.0, 1.0))
}

struct ConstraintPatterns {
    about: Regex,
    inspired: Regex,
    without: Regex,
    at_least: Regex,
    at_most: Regex,
    between: Regex,
    range: Regex,
}

// Clause bodies run lazily up to punctuation or the start of another rule.
const CLAUSE_END: &str = r"\s*(?:[,.;:!?\n]|\binspired\s+by\b|\busing\b|\bwithout\b|\bbetween\b|\bat\s+(?:least|most)\b|$)";

fn patterns() -> &'static ConstraintPatterns {
    static PATTERNS: OnceLock<ConstraintPatterns> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let clause = |lead: &str| Regex::new(&format!(r"(?i)\b{lead}\s+(.+?){CLAUSE_END}")).unwrap();
        ConstraintPatterns {
            about: clause("about"),
            inspired: clause(r"inspired\s+by"),
            without: clause(r"without\s+mentioning"),
            at_least: Regex::new(r"(?i)\bat\s+least\s+(\d+)\s+(words?|lines?)\b").unwrap(),
            at_most: Regex::new(r"(?i)\bat\s+most\s+(\d+)\s+(words?|lines?)\b").unwrap(),
            between: Regex::new(r"(?i)\bbetween\s+(\d+)\s+and\s+(\d+)\s+(words?|lines?)\b").unwrap(),
            range: Regex::new(r"(?i)\b(\d+)\s*(?:-|–|to)\s*(\d+)\s+(words?|lines?)\b").unwrap(),
        }
    })
}

fn push_unique(list: &mut Vec<String>, items: impl IntoIterator<Item = String>) {
    for item in items {
        if !list.contains(&item) {
            list.push(item);
        }
    }
}

/// Recovers themes, styles, length bounds and forbidden terms from an
/// instruction with fixed pattern rules. Unmatched text yields an empty set.
pub fn parse_constraints(instruction: &str, lexicon: &StyleLexicon) -> ConstraintSet {
    let p = patterns();
    let mut set = ConstraintSet::default();

    for re in [&p.about, &p.inspired] {
        for cap in re.captures_iter(instruction) {
            push_unique(&mut set.theme_keywords, content_words(&cap[1]));
        }
    }
    for cap in p.without.captures_iter(instruction) {
        push_unique(&mut set.forbidden_terms, content_words(&cap[1]));
    }
    push_unique(
        &mut set.style_keywords,
        tokenize(instruction).into_iter().filter(|t| lexicon.contains(t)),
    );

    let is_words = |unit: &str| unit.to_lowercase().starts_with("word");
    let num = |s: &str| s.parse::<usize>().ok().filter(|n| *n > 0);
    for cap in p.at_least.captures_iter(instruction) {
        if let Some(n) = num(&cap[1]) {
            if is_words(&cap[2]) {
                set.min_words = Some(n);
            } else {
                set.min_lines = Some(n);
            }
        }
    }
    for cap in p.at_most.captures_iter(instruction) {
        if let (Some(n), true) = (num(&cap[1]), is_words(&cap[2])) {
            set.max_words = Some(n);
        }
    }
    for cap in p.between.captures_iter(instruction).chain(p.range.captures_iter(instruction)) {
        let (Some(a), Some(b)) = (num(&cap[1]), num(&cap[2])) else {
            continue;
        };
        let (lo, hi) = (a.min(b), a.max(b));
        if is_words(&cap[3]) {
            set.min_words = Some(lo);
            set.max_words = Some(hi);
        } else {
            set.min_lines = Some(lo);
        }
    }
    if let (Some(lo), Some(hi)) = (set.min_words, set.max_words) {
        if lo > hi {
            set.min_words = Some(hi);
            set.max_words = Some(lo);
        }
    }
    set
}

/// Outcome of each individual check, keyed by a readable label.
pub fn adherence_checks(
    text: &str,
    constraints: &ConstraintSet,
    lexicon: &StyleLexicon,
) -> BTreeMap<String, bool> {
    let tokens = tokenize(text);
    let mut checks = BTreeMap::new();
    for theme in &constraints.theme_keywords {
        checks.insert(format!("theme:{theme}"), contains_phrase(&tokens, theme));
    }
    for style in &constraints.style_keywords {
        let hit = contains_phrase(&tokens, style)
            || lexicon.synonyms(style).iter().any(|s| contains_phrase(&tokens, s));
        checks.insert(format!("style:{style}"), hit);
    }
    if constraints.min_words.is_some() || constraints.max_words.is_some() {
        let n = tokens.len();
        let ok = constraints.min_words.is_none_or(|lo| n >= lo)
            && constraints.max_words.is_none_or(|hi| n <= hi);
        checks.insert("length:words".into(), ok);
    }
    if let Some(min) = constraints.min_lines {
        checks.insert("length:lines".into(), count_lines(text) >= min);
    }
    for term in &constraints.forbidden_terms {
        checks.insert(format!("forbidden:{term}"), !contains_phrase(&tokens, term));
    }
    checks
}

/// Passed checks over total checks; 1.0 when there is nothing to check.
pub fn instruction_adherence(text: &str, constraints: &ConstraintSet, lexicon: &StyleLexicon) -> f64 {
    let checks = adherence_checks(text, constraints, lexicon);
    if checks.is_empty() {
        return 1.0;
    }
    let passed = checks.values().filter(|ok| **ok).count();
    passed as f64 / checks.len() as f64
}

/// Scores a generation. Implementations must be deterministic.
pub trait MetricScorer: Send + Sync {
    fn score(
        &self,
        text: &str,
        reference: &SviDocument,
        constraints: &ConstraintSet,
    ) -> Result<MetricScores, MetricError>;

    fn label(&self) -> &str;
}

/// The surface-level scorer.
#[derive(Debug, Clone)]
pub struct AutoScorer {
    pub corpus: ReferenceCorpus,
    pub lexicon: StyleLexicon,
    pub weights: CreativityWeights,
}

impl Default for AutoScorer {
    fn default() -> Self {
        Self {
            corpus: ReferenceCorpus::default(),
            lexicon: StyleLexicon::bundled().clone(),
            weights: CreativityWeights::default(),
        }
    }
}

impl MetricScorer for AutoScorer {
    fn score(
        &self,
        text: &str,
        reference: &SviDocument,
        constraints: &ConstraintSet,
    ) -> Result<MetricScores, MetricError> {
        self.weights.validate()?;
        let vg = visual_grounding(text, reference);
        let c = creativity(text, &self.corpus, &self.weights)?;
        let ia = instruction_adherence(text, constraints, &self.lexicon);
        Ok(MetricScores::new(vg, c, ia))
    }

    fn label(&self) -> &str {
        "VisuGen-auto"
    }
}

/// Scores `text` against `doc` and the constraints parsed from
/// `instruction`, with the bundled lexicon and default weights.
pub fn score(
    text: &str,
    doc: &SviDocument,
    instruction: &str,
    corpus: &ReferenceCorpus,
) -> Result<MetricScores, MetricError> {
    let scorer = AutoScorer {
        corpus: corpus.clone(),
        ..AutoScorer::default()
    };
    let constraints = parse_constraints(instruction, &scorer.lexicon);
    scorer.score(text, doc, &constraints)
}
